use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_qhpc");

fn qhpc(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("QHPC_CONFIG")
        .env_remove("QHPC_TOKEN")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Server {
    child: Child,
    url: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start(subcommand: &str, config: &Path) -> Server {
    let mut child = Command::new(BIN)
        .args([subcommand, "--port", "0", "--config"])
        .arg(config)
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    Server { child, url }
}

const CONFIG: &str = r#"{
    "seed": 5,
    "projects": [{"project_id": "proj-a", "members": ["alice"], "grants": {"shots": 5000, "qpu_seconds": 100}}],
    "tokens": [{"token": "tok-alice", "user": "alice", "project_id": "proj-a"}]
}"#;

#[test]
fn usage_errors_exit_2() {
    let o = qhpc(&["replay", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(qhpc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(qhpc(&["replay", "--policy", "lottery"]).status.code(), Some(2));
    assert_eq!(qhpc(&["--help"]).status.code(), Some(0));
}

#[test]
fn replay_writes_identical_files_each_run() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let o = qhpc(&[
            "replay", "--profile", "table1", "--policy", "fairshare", "--policy", "fifo", "--seed", "0", "--out-dir",
        ]
        .iter()
        .copied()
        .chain([d.path().to_str().unwrap()])
        .collect::<Vec<_>>());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("fairshare: 364 completed, 0 rejected, 2533588 shots"));
    }
    for name in ["fairshare.trace.tsv", "fairshare.report.txt", "fifo.trace.tsv", "fifo.report.txt", "comparison.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs");
    }
    let report = std::fs::read_to_string(dirs[0].path().join("fifo.report.txt")).unwrap();
    assert!(report.contains("shots_committed\t2533588"));
    let trace = std::fs::read_to_string(dirs[0].path().join("fifo.trace.tsv")).unwrap();
    assert_eq!(trace.lines().filter(|l| l.split('\t').nth(1) == Some("job_done")).count(), 364);
}

#[test]
fn replay_with_limits_and_custom_workload() {
    let d = tempfile::tempdir().unwrap();
    let wl = d.path().join("workload.json");
    let out = d.path().join("out");
    let o = qhpc(&[
        "replay",
        "--max-shots-per-job",
        "20000",
        "--emit-workload",
        wl.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let line = stdout(&o);
    let nums: Vec<usize> = line.split(|c: char| !c.is_ascii_digit()).filter_map(|s| s.parse().ok()).take(2).collect();
    assert_eq!(nums[0] + nums[1], 364, "{line}");
    assert!(nums[1] > 0);

    // the emitted workload replays to the same report
    let again = d.path().join("again");
    let o = qhpc(&[
        "replay",
        "--workload",
        wl.to_str().unwrap(),
        "--max-shots-per-job",
        "20000",
        "--out-dir",
        again.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(out.join("fifo.report.txt")).unwrap(),
        std::fs::read(again.join("fifo.report.txt")).unwrap()
    );
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, "[{}]").unwrap();
    assert_eq!(qhpc(&["replay", "--workload", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn live_gateway_session() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("gateway.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let bell = d.path().join("bell.qc");
    std::fs::write(&bell, qhpc_core::circuit::serialize_circuit(&qhpc_core::circuit::QuantumCircuit::bell())).unwrap();
    let srv = start("serve-gateway", &cfg);
    let g = srv.url.as_str();

    let o = qhpc(&["devices", "--gateway", g]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("helmi-sim\t5\tavailable"));

    let o = qhpc(&["submit", "--gateway", g, "--token", "tok-alice", "--device", "helmi-sim", "--circuit", bell.to_str().unwrap(), "--shots", "1000"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let job = stdout(&o).trim().to_string();
    assert!(!job.is_empty());

    let o = qhpc(&["submit", "--gateway", g, "--token", "tok-alice", "--device", "helmi-sim", "--circuit", "ghz3", "--shots", "500", "--wait"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let (_, json) = text.split_once('\n').unwrap();
    let res: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(res["state"], "done");
    assert_eq!(res["usage"]["shots"], 500);

    let o = qhpc(&["status", &job, "--gateway", g]);
    assert_eq!(o.status.code(), Some(0));
    let o = qhpc(&["results", &job, "--gateway", g]);
    let res: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    // FIFO: the earlier job finished before the waited-on one
    assert_eq!(res["state"], "done");
    let total: u64 = res["counts"][0].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 1000);

    // 1500 used of 5000; 4000 more is over quota
    let o = qhpc(&["submit", "--gateway", g, "--token", "tok-alice", "--device", "helmi-sim", "--circuit", "bell", "--shots", "4000"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("quota_exceeded"));

    let o = qhpc(&["report", "--accounting", g, "--project", "proj-a"]);
    assert_eq!(o.status.code(), Some(0));
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(rep["totals"]["shots"].as_f64().unwrap() >= 500.0);

    assert_eq!(qhpc(&["status", "job-nope", "--gateway", g]).status.code(), Some(4));
    let o = qhpc(&["submit", "--gateway", g, "--token", "tok-alice", "--device", "helmi-sim", "--circuit", "no-such.qc", "--shots", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn accounting_service_alone() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("acc.json");
    let ledger = d.path().join("ledger.jsonl");
    std::fs::write(&cfg, CONFIG).unwrap();
    {
        let srv = start("serve-accounting", &cfg);
        let o = qhpc(&["report", "--accounting", &srv.url, "--project", "proj-a", "--from", "0", "--to", "10"]);
        assert_eq!(o.status.code(), Some(0));
        let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(rep["totals"]["shots"], 0.0);
        assert_eq!(qhpc(&["devices", "--gateway", &srv.url]).status.code(), Some(4));
    }
    let mut child = Command::new(BIN)
        .args(["serve-accounting", "--port", "0", "--ledger"])
        .arg(&ledger)
        .arg("--config")
        .arg(&cfg)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(std::fs::read_to_string(&ledger).unwrap().contains("project_opened"));
}

#[test]
fn unreachable_service_exits_4() {
    let o = qhpc(&["devices", "--gateway", "http://127.0.0.1:9"]);
    assert_eq!(o.status.code(), Some(4));
}
