use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use qhpc_core::circuit::{parse_circuit, serialize_batch, CircuitBatch};
use qhpc_core::gateway::GatewayPolicy;
use qhpc_core::scheduler::Policy;
use qhpc_core::workload::{
    builtin_circuit, compare_reports, generate_workload, run_replay, ReplayOptions, Workload, WorkloadProfile,
};
use qhpc_service::{accounting_app, bind, gateway_app, serve, GatewayService, Router, ServiceConfig};
use serde_json::Value;

const EXIT_USAGE: u8 = 2;
const EXIT_REJECTED: u8 = 3;
const EXIT_SERVICE: u8 = 4;

#[derive(Parser)]
#[command(name = "qhpc", version, about = "Hybrid HPC+QC gateway, scheduler replay and accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway HTTP service (accounting endpoints included).
    ServeGateway(ServeArgs),
    /// Run the accounting HTTP service alone.
    ServeAccounting(ServeArgs),
    /// Submit a circuit to a device.
    Submit(SubmitArgs),
    /// Print a job's state document.
    Status(JobArgs),
    /// Print a job's result document.
    Results(JobArgs),
    /// List registered devices.
    Devices(RemoteArgs),
    /// Replay a workload through the scheduler, gateway and accounting.
    Replay(ReplayArgs),
    /// Print a project's usage report.
    Report(ReportArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// JSON config file.
    #[arg(long, env = "QHPC_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    /// 0 picks a free port.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    seed: Option<u64>,
    /// Append-only ledger file.
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Args)]
struct RemoteArgs {
    #[arg(long, env = "QHPC_GATEWAY_URL", default_value = "http://127.0.0.1:8080")]
    gateway: String,
}

#[derive(Args)]
struct JobArgs {
    job_id: String,
    #[command(flatten)]
    remote: RemoteArgs,
}

#[derive(Args)]
struct SubmitArgs {
    #[command(flatten)]
    remote: RemoteArgs,
    #[arg(long, env = "QHPC_TOKEN")]
    token: String,
    #[arg(long)]
    device: String,
    /// Circuit document path, or a built-in name (bell, ghz3, ghz5, x).
    #[arg(long, required = true)]
    circuit: Vec<String>,
    #[arg(long)]
    shots: u64,
    /// Defaults to the project bound to the token.
    #[arg(long)]
    project: Option<String>,
    /// Poll until the job ends and print its results.
    #[arg(long)]
    wait: bool,
    /// Polling limit in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
}

#[derive(Args)]
struct ReplayArgs {
    /// Named workload profile.
    #[arg(long, conflicts_with = "workload", default_value = "table1")]
    profile: String,
    /// Workload document instead of a generated profile.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Repeat to compare policies.
    #[arg(long, default_value = "fifo")]
    policy: Vec<Policy>,
    #[arg(long, default_value = "helmi-sim")]
    device: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    cpu_capacity: usize,
    #[arg(long)]
    max_shots_per_job: Option<u64>,
    #[arg(long)]
    max_jobs_per_user_per_day: Option<u64>,
    /// Shots granted to every project (default: exactly what it needs).
    #[arg(long)]
    shots_grant: Option<u64>,
    #[arg(long)]
    noiseless: bool,
    /// Also write the generated workload document here.
    #[arg(long)]
    emit_workload: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, env = "QHPC_ACCOUNTING_URL", default_value = "http://127.0.0.1:8080")]
    accounting: String,
    #[arg(long)]
    project: String,
    #[arg(long)]
    from: Option<f64>,
    #[arg(long)]
    to: Option<f64>,
}

enum Failure {
    Usage(String),
    Rejected(String),
    Service(String),
}

type Outcome = Result<(), Failure>;

fn service<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Service(e.to_string())
}

fn load_config(args: &ServeArgs) -> Result<ServiceConfig, Failure> {
    let cfg = match &args.config {
        Some(p) => ServiceConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ServiceConfig::default(),
    };
    let mut cfg = cfg.with_env().map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(h) = &args.host {
        cfg.host = h.clone();
    }
    if let Some(p) = args.port {
        cfg.port = p;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(l) = &args.ledger {
        cfg.ledger = Some(l.clone());
    }
    Ok(cfg)
}

fn run_server(cfg: &ServiceConfig, app: Router) -> Outcome {
    let rt = tokio::runtime::Runtime::new().map_err(service)?;
    rt.block_on(async {
        let (listener, addr) = bind(&cfg.host, cfg.port).await.map_err(service)?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        serve(listener, app).await.map_err(service)
    })
}

fn serve_gateway(args: ServeArgs) -> Outcome {
    let cfg = load_config(&args)?;
    let svc = GatewayService::from_config(&cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    run_server(&cfg, gateway_app(svc))
}

fn serve_accounting(args: ServeArgs) -> Outcome {
    let cfg = load_config(&args)?;
    let acc = cfg.build_accounting().map_err(|e| Failure::Usage(e.to_string()))?;
    run_server(&cfg, accounting_app(Arc::new(acc)))
}

fn client() -> Result<reqwest::blocking::Client, Failure> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .map_err(service)
}

/// Any non-success status other than a rejection is a service failure.
fn json_of(resp: reqwest::blocking::Response) -> Result<(reqwest::StatusCode, Value), Failure> {
    let status = resp.status();
    let text = resp.text().map_err(service)?;
    let body: Value = serde_json::from_str(&text).unwrap_or(Value::String(text));
    if status.is_success() || status == reqwest::StatusCode::UNPROCESSABLE_ENTITY {
        Ok((status, body))
    } else {
        let msg = body.get("error").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| body.to_string());
        Err(Failure::Service(format!("{status}: {msg}")))
    }
}

fn get(url: &str) -> Result<Value, Failure> {
    Ok(json_of(client()?.get(url).send().map_err(service)?)?.1)
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("value serializes"));
}

fn load_circuit(spec: &str) -> Result<qhpc_core::circuit::QuantumCircuit, Failure> {
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{spec}: {e}")))?;
        parse_circuit(&text).map_err(|e| Failure::Usage(format!("{spec}: {e}")))
    } else {
        builtin_circuit(spec).map_err(|_| Failure::Usage(format!("{spec}: no such file or built-in circuit")))
    }
}

fn submit(args: SubmitArgs) -> Outcome {
    let circuits = args.circuit.iter().map(|c| load_circuit(c)).collect::<Result<Vec<_>, _>>()?;
    let batch = CircuitBatch::new(circuits, args.shots).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut body: Value = serde_json::from_str(&serialize_batch(&batch)).expect("batch serializes");
    if let Some(p) = &args.project {
        body["project_id"] = Value::String(p.clone());
    }
    let base = args.remote.gateway.trim_end_matches('/');
    let resp = client()?
        .post(format!("{base}/devices/{}/jobs", args.device))
        .bearer_auth(&args.token)
        .json(&body)
        .send()
        .map_err(service)?;
    let (status, doc) = json_of(resp)?;
    let job_id = doc["job_id"].as_str().unwrap_or_default().to_string();
    if status == reqwest::StatusCode::UNPROCESSABLE_ENTITY {
        println!("{job_id}");
        return Err(Failure::Rejected(doc["reason"].as_str().unwrap_or("rejected").to_string()));
    }
    println!("{job_id}");
    if !args.wait {
        return Ok(());
    }
    let start = Instant::now();
    let mut delay = 0.05;
    loop {
        let doc = get(&format!("{base}/jobs/{job_id}"))?;
        match doc["state"].as_str() {
            Some("done") => break,
            Some("failed") => {
                return Err(Failure::Service(format!("job failed: {}", doc["reason"].as_str().unwrap_or("unknown"))))
            }
            _ => {}
        }
        if start.elapsed().as_secs_f64() > args.timeout {
            return Err(Failure::Service(format!("timed out waiting for {job_id}")));
        }
        std::thread::sleep(Duration::from_secs_f64(delay));
        delay = (delay * 2.0).min(2.0);
    }
    print_json(&get(&format!("{base}/jobs/{job_id}/results"))?);
    Ok(())
}

fn devices(args: RemoteArgs) -> Outcome {
    let list = get(&format!("{}/devices", args.gateway.trim_end_matches('/')))?;
    println!("device\tqubits\tstatus\tqueue");
    for d in list.as_array().into_iter().flatten() {
        println!(
            "{}\t{}\t{}\t{}",
            d["spec"]["device_id"].as_str().unwrap_or("?"),
            d["spec"]["topology"]["n_qubits"],
            d["status"]["status"].as_str().unwrap_or("?"),
            d["queue_length"]
        );
    }
    Ok(())
}

fn replay(args: ReplayArgs) -> Outcome {
    let workload = match &args.workload {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            Workload::parse(&text).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => {
            let mut profile = WorkloadProfile::preset(&args.profile)
                .ok_or_else(|| Failure::Usage(format!("unknown profile `{}`", args.profile)))?;
            profile.seed = profile.seed.wrapping_add(args.seed);
            generate_workload(&profile).map_err(|e| Failure::Usage(e.to_string()))?
        }
    };
    std::fs::create_dir_all(&args.out_dir).map_err(service)?;
    if let Some(p) = &args.emit_workload {
        std::fs::write(p, workload.to_json()).map_err(service)?;
    }
    let mut gateway_policy = GatewayPolicy::unlimited();
    if let Some(n) = args.max_shots_per_job {
        gateway_policy.max_shots_per_job = n;
    }
    if let Some(n) = args.max_jobs_per_user_per_day {
        gateway_policy.max_jobs_per_user_per_day = n;
    }
    let mut reports = Vec::new();
    for &policy in &args.policy {
        let opts = ReplayOptions {
            policy,
            device: args.device.clone(),
            cpu_capacity: args.cpu_capacity,
            gateway_policy: gateway_policy.clone(),
            shots_grant: args.shots_grant,
            noisy: !args.noiseless,
            seed: args.seed,
            ..Default::default()
        };
        let out = run_replay(&workload, &opts).map_err(|e| Failure::Usage(e.to_string()))?;
        let trace = args.out_dir.join(format!("{policy}.trace.tsv"));
        let report = args.out_dir.join(format!("{policy}.report.txt"));
        std::fs::write(&trace, out.trace.render()).map_err(service)?;
        std::fs::write(&report, out.report.render()).map_err(service)?;
        println!(
            "{policy}: {} completed, {} rejected, {} shots -> {}, {}",
            out.report.jobs_completed,
            out.report.jobs_rejected,
            out.report.shots_committed,
            trace.display(),
            report.display()
        );
        reports.push(out.report);
    }
    if reports.len() > 1 {
        let path = args.out_dir.join("comparison.csv");
        std::fs::write(&path, compare_reports(&reports)).map_err(service)?;
        println!("comparison -> {}", path.display());
    }
    Ok(())
}

fn report(args: ReportArgs) -> Outcome {
    let mut url = format!("{}/projects/{}/report", args.accounting.trim_end_matches('/'), args.project);
    let q: Vec<String> = [("from", args.from), ("to", args.to)]
        .iter()
        .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
        .collect();
    if !q.is_empty() {
        url = format!("{url}?{}", q.join("&"));
    }
    print_json(&get(&url)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::ServeGateway(a) => serve_gateway(a),
        Command::ServeAccounting(a) => serve_accounting(a),
        Command::Submit(a) => submit(a),
        Command::Status(a) => get(&format!("{}/jobs/{}", a.remote.gateway.trim_end_matches('/'), a.job_id)).map(|v| print_json(&v)),
        Command::Results(a) => {
            get(&format!("{}/jobs/{}/results", a.remote.gateway.trim_end_matches('/'), a.job_id)).map(|v| print_json(&v))
        }
        Command::Devices(a) => devices(a),
        Command::Replay(a) => replay(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Rejected(reason)) => {
            eprintln!("rejected: {reason}");
            ExitCode::from(EXIT_REJECTED)
        }
        Err(Failure::Service(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_SERVICE)
        }
    }
}
