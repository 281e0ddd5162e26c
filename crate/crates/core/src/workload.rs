//! Synthetic workloads shaped like a recorded usage summary, and their
//! replay through accounting, gateway and scheduler in virtual time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{Accounting, Period, Resource};
use crate::backend::{derive_seed, DeviceSpec};
use crate::circuit::{CircuitBatch, QuantumCircuit};
use crate::gateway::{DailyWindow, DeviceState, Gateway, GatewayConfig, GatewayPolicy};
use crate::scheduler::{ComputeJob, EventTrace, JobPhase, JobRecord, Policy, Scheduler, SchedulerConfig, SchedulerError};

pub const MIN_JOB_SHOTS: f64 = 100.0;
pub const MAX_JOB_SHOTS: f64 = 100_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("infeasible profile: {0}")]
    InfeasibleProfile(String),
    #[error("malformed workload: {0}")]
    Malformed(String),
    #[error("unknown circuit reference `{0}`")]
    UnknownCircuit(String),
    #[error("unknown device preset `{0}`")]
    UnknownDevice(String),
    #[error("replay setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub n_users: usize,
    pub n_jobs: usize,
    pub total_shots: u64,
    pub window_s: f64,
    pub seed: u64,
}

impl WorkloadProfile {
    /// 83 users, 364 jobs and 2,533,588 shots over a four-day window.
    pub fn table1() -> Self {
        Self {
            n_users: 83,
            n_jobs: 364,
            total_shots: 2_533_588,
            window_s: 4.0 * 86_400.0,
            seed: 2023,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "table1" => Some(Self::table1()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InfeasibleProfile(m));
        if self.n_users == 0 {
            return bad("need at least one user".into());
        }
        if self.n_jobs < self.n_users {
            return bad(format!("{} jobs cannot cover {} users", self.n_jobs, self.n_users));
        }
        if self.total_shots < self.n_jobs as u64 {
            return bad(format!("{} shots cannot give {} jobs one shot each", self.total_shots, self.n_jobs));
        }
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return bad("arrival window must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadJob {
    pub job_id: String,
    pub project: String,
    pub user: String,
    pub submit_at_s: f64,
    pub cpu_core_seconds: f64,
    pub needs_qpu: bool,
    pub shots: u64,
    pub circuits_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Workload {
    pub jobs: Vec<WorkloadJob>,
}

impl Workload {
    pub fn total_shots(&self) -> u64 {
        self.jobs.iter().map(|j| j.shots).sum()
    }

    pub fn users(&self) -> Vec<String> {
        let mut u: Vec<String> = self.jobs.iter().map(|j| j.user.clone()).collect();
        u.sort();
        u.dedup();
        u
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("workload serializes");
        s.push('\n');
        s
    }

    pub fn parse(document: &str) -> Result<Self, WorkloadError> {
        let w: Workload = serde_json::from_str(document).map_err(|e| WorkloadError::Malformed(e.to_string()))?;
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let mut ids = std::collections::HashSet::new();
        for j in &self.jobs {
            if !ids.insert(&j.job_id) {
                return Err(WorkloadError::Malformed(format!("duplicate job id `{}`", j.job_id)));
            }
            if j.needs_qpu && j.shots == 0 {
                return Err(WorkloadError::Malformed(format!("{}: hybrid job with zero shots", j.job_id)));
            }
            if !(j.submit_at_s >= 0.0 && j.cpu_core_seconds > 0.0) {
                return Err(WorkloadError::Malformed(format!("{}: bad time or cpu request", j.job_id)));
            }
            if j.needs_qpu {
                builtin_circuit(&j.circuits_ref)?;
            }
        }
        Ok(())
    }
}

/// Named circuits a workload can reference.
pub fn builtin_circuit(name: &str) -> Result<QuantumCircuit, WorkloadError> {
    match name {
        "bell" => Ok(QuantumCircuit::bell()),
        "ghz3" => Ok(QuantumCircuit::ghz(3)),
        "ghz5" => Ok(QuantumCircuit::ghz(5)),
        "x" => {
            let mut c = QuantumCircuit::new("x", 1);
            c.x(0).measure(0);
            Ok(c)
        }
        other => Err(WorkloadError::UnknownCircuit(other.into())),
    }
}

const WORKLOAD_CIRCUITS: [&str; 3] = ["bell", "ghz3", "ghz5"];

/// Splits `total` into integer parts proportional to `weights`, each at
/// least 1, by largest remainder (ties to the lower index).
pub fn apportion(weights: &[f64], total: u64) -> Vec<u64> {
    let n = weights.len() as u64;
    assert!(n > 0 && total >= n, "need at least one unit per part");
    let spare = total - n;
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| spare as f64 * w / sum).collect();
    let mut parts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    // float rounding can leave the floors a unit above or below the target
    let mut left = spare as i64 - assigned as i64;
    let mut i = 0;
    while left > 0 {
        parts[order[i % order.len()]] += 1;
        left -= 1;
        i += 1;
    }
    let mut j = order.len();
    while left < 0 {
        j -= 1;
        let k = order[j % order.len()];
        if parts[k] > 0 {
            parts[k] -= 1;
            left += 1;
        }
        if j == 0 {
            j = order.len();
        }
    }
    parts.iter().map(|p| p + 1).collect()
}

/// Deterministic per seed: every user gets at least one job, arrivals are
/// uniform over the window and per-job shots are log-uniform draws scaled
/// to the exact total.
pub fn generate_workload(profile: &WorkloadProfile) -> Result<Workload, WorkloadError> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let users: Vec<String> = (1..=profile.n_users).map(|i| format!("user-{i:03}")).collect();
    let mut owners: Vec<usize> = (0..profile.n_users).collect();
    owners.extend((profile.n_users..profile.n_jobs).map(|_| rng.gen_range(0..profile.n_users)));

    let (lo, hi) = (MIN_JOB_SHOTS.ln(), MAX_JOB_SHOTS.ln());
    let mut drafts: Vec<(f64, usize, f64, f64, &str)> = owners
        .into_iter()
        .map(|u| {
            let at = rng.gen_range(0.0..profile.window_s);
            let weight = rng.gen_range(lo..hi).exp();
            let cpu = rng.gen_range(30.0..300.0);
            let circuit = WORKLOAD_CIRCUITS[rng.gen_range(0..WORKLOAD_CIRCUITS.len())];
            (at, u, weight, cpu, circuit)
        })
        .collect();
    drafts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let weights: Vec<f64> = drafts.iter().map(|d| d.2).collect();
    let shots = apportion(&weights, profile.total_shots);

    let jobs = drafts
        .into_iter()
        .zip(shots)
        .enumerate()
        .map(|(i, ((at, u, _, cpu, circuit), shots))| WorkloadJob {
            job_id: format!("job-{:04}", i + 1),
            project: format!("proj-{}", users[u]),
            user: users[u].clone(),
            submit_at_s: (at * 1e3).round() / 1e3,
            cpu_core_seconds: (cpu * 1e3).round() / 1e3,
            needs_qpu: true,
            shots,
            circuits_ref: circuit.into(),
        })
        .collect();
    Ok(Workload { jobs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    pub policy: Policy,
    pub device: String,
    pub cpu_capacity: usize,
    pub gateway_policy: GatewayPolicy,
    /// Timeslot window.
    pub window: DailyWindow,
    /// Shot grant per project; `None` grants each project exactly what its
    /// jobs request.
    pub shots_grant: Option<u64>,
    pub noisy: bool,
    pub seed: u64,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            policy: Policy::Fifo,
            device: "helmi-sim".into(),
            cpu_capacity: 16,
            gateway_policy: GatewayPolicy::unlimited(),
            window: DailyWindow {
                start_s: 8.0 * 3600.0,
                end_s: 20.0 * 3600.0,
            },
            shots_grant: None,
            noisy: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: Policy,
    pub device: String,
    pub jobs_total: usize,
    pub jobs_completed: usize,
    pub jobs_rejected: usize,
    pub shots_committed: u64,
    pub mean_wait_s: f64,
    pub p95_wait_s: f64,
    pub utilization: f64,
    pub per_user_shots: BTreeMap<String, u64>,
}

/// Nearest-rank percentile of an unsorted sample; 0 when empty.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

impl PolicyReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "policy\t{}", self.policy);
        let _ = writeln!(s, "device\t{}", self.device);
        let _ = writeln!(s, "jobs_total\t{}", self.jobs_total);
        let _ = writeln!(s, "jobs_completed\t{}", self.jobs_completed);
        let _ = writeln!(s, "jobs_rejected\t{}", self.jobs_rejected);
        let _ = writeln!(s, "shots_committed\t{}", self.shots_committed);
        let _ = writeln!(s, "mean_wait_s\t{:.6}", self.mean_wait_s);
        let _ = writeln!(s, "p95_wait_s\t{:.6}", self.p95_wait_s);
        let _ = writeln!(s, "utilization\t{:.9}", self.utilization);
        s.push_str("\nuser,shots\n");
        for (u, n) in &self.per_user_shots {
            let _ = writeln!(s, "{u},{n}");
        }
        s
    }
}

/// One CSV row per policy report.
pub fn compare_reports(reports: &[PolicyReport]) -> String {
    let mut s = String::from("policy,jobs_completed,jobs_rejected,shots_committed,mean_wait_s,p95_wait_s,utilization\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.9}",
            r.policy, r.jobs_completed, r.jobs_rejected, r.shots_committed, r.mean_wait_s, r.p95_wait_s, r.utilization
        );
    }
    s
}

pub struct ReplayOutcome {
    pub trace: EventTrace,
    pub report: PolicyReport,
    pub jobs: Vec<JobRecord>,
    pub accounting: Arc<Accounting>,
    pub gateway: Arc<Gateway>,
}

fn setup_err(e: impl std::fmt::Display) -> WorkloadError {
    WorkloadError::Setup(e.to_string())
}

/// Runs the workload to completion in virtual time and summarizes it.
pub fn run_replay(workload: &Workload, opts: &ReplayOptions) -> Result<ReplayOutcome, WorkloadError> {
    workload.validate()?;
    let spec = DeviceSpec::preset(&opts.device).ok_or_else(|| WorkloadError::UnknownDevice(opts.device.clone()))?;

    let accounting = Arc::new(Accounting::new());
    let mut needs: BTreeMap<&str, (Vec<String>, u64, f64)> = BTreeMap::new();
    for j in &workload.jobs {
        let e = needs.entry(j.project.as_str()).or_default();
        if !e.0.contains(&j.user) {
            e.0.push(j.user.clone());
        }
        e.1 += j.shots;
        e.2 += j.cpu_core_seconds;
    }
    for (project, (members, shots, cpu)) in &needs {
        accounting.open_project_named(project, members.clone()).map_err(setup_err)?;
        let shots_grant = opts.shots_grant.unwrap_or(*shots).max(1);
        accounting
            .approve_project(
                project,
                &[
                    (Resource::Shots, shots_grant),
                    (Resource::CpuCoreSeconds, Resource::units_from_seconds(cpu * 2.0 + 1.0)),
                    (Resource::QpuSeconds, Resource::units_from_seconds(1e6)),
                ],
            )
            .map_err(setup_err)?;
    }

    let gateway = Arc::new(
        Gateway::new(
            accounting.clone(),
            GatewayConfig {
                policy: opts.gateway_policy.clone(),
                seed: opts.seed,
                noisy: opts.noisy,
                retention: workload.jobs.len().max(1) * 2,
            },
        )
        .map_err(setup_err)?,
    );
    let device = gateway.register_device(spec).map_err(setup_err)?;
    gateway
        .calibrate(&device, derive_seed(opts.seed, 0xCA11), 0.0)
        .map_err(setup_err)?;

    let mut sched = Scheduler::new(
        accounting.clone(),
        gateway.clone(),
        SchedulerConfig {
            policy: opts.policy,
            cpu_capacity: opts.cpu_capacity,
            window: opts.window,
        },
    )?;
    sched.inject_signal(&device, DeviceState::Available, 0.0)?;

    let horizon = workload.jobs.iter().map(|j| j.submit_at_s).fold(0.0, f64::max) + 1e9;
    for j in &workload.jobs {
        let batch = if j.needs_qpu {
            Some(CircuitBatch::new(vec![builtin_circuit(&j.circuits_ref)?], j.shots).map_err(setup_err)?)
        } else {
            None
        };
        let job = ComputeJob {
            job_id: j.job_id.clone(),
            project_id: j.project.clone(),
            user: j.user.clone(),
            cpu_core_seconds: j.cpu_core_seconds,
            cores: 1,
            needs_qpu: j.needs_qpu,
            qc_batch: batch,
            device_id: j.needs_qpu.then(|| device.clone()),
            walltime_limit_s: horizon,
            submitted_at: j.submit_at_s,
        };
        // jobs refused at submission count as rejected in the report
        match sched.submit(job) {
            Ok(_) | Err(SchedulerError::QuotaPrecheck { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    sched.run()?;

    let jobs: Vec<JobRecord> = sched.jobs().cloned().collect();
    let makespan = jobs.iter().filter_map(|r| r.finished_at).fold(0.0, f64::max);
    let report = summarize(&jobs, workload.jobs.len(), opts, &accounting, makespan);
    Ok(ReplayOutcome {
        trace: sched.trace().clone(),
        report,
        jobs,
        accounting,
        gateway,
    })
}

fn summarize(
    jobs: &[JobRecord],
    total: usize,
    opts: &ReplayOptions,
    accounting: &Accounting,
    end: f64,
) -> PolicyReport {
    let waits: Vec<f64> = jobs
        .iter()
        .filter_map(|r| r.qc_started_at.map(|t| t - r.job.submitted_at))
        .collect();
    let busy: f64 = jobs
        .iter()
        .filter_map(|r| match (r.qc_started_at, r.finished_at) {
            (Some(s), Some(f)) if r.phase == JobPhase::Done => Some(f - s),
            _ => None,
        })
        .sum();
    let mut per_user: BTreeMap<String, u64> = BTreeMap::new();
    for r in jobs.iter().filter(|r| r.phase == JobPhase::Done) {
        *per_user.entry(r.job.user.clone()).or_default() += r.shots_used;
    }
    let completed = jobs.iter().filter(|r| r.phase == JobPhase::Done).count();
    PolicyReport {
        policy: opts.policy,
        device: opts.device.clone(),
        jobs_total: total,
        jobs_completed: completed,
        jobs_rejected: total - completed,
        shots_committed: accounting.usage_report_all(Period::all()).total(Resource::Shots),
        mean_wait_s: if waits.is_empty() {
            0.0
        } else {
            waits.iter().sum::<f64>() / waits.len() as f64
        },
        p95_wait_s: percentile(&waits, 95.0),
        utilization: if end > 0.0 { (busy / end).clamp(0.0, 1.0) } else { 0.0 },
        per_user_shots: per_user,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_hits_total() {
        assert_eq!(apportion(&[1.0], 100), vec![100]);
        let parts = apportion(&[1.0, 1.0, 1.0], 10);
        assert_eq!(parts.iter().sum::<u64>(), 10);
        assert_eq!(parts, vec![4, 3, 3]);
        assert_eq!(apportion(&[5.0, 1e-9], 2), vec![1, 1]);
    }

    #[test]
    fn profile_validation() {
        let ok = WorkloadProfile {
            n_users: 1,
            n_jobs: 1,
            total_shots: 100,
            window_s: 10.0,
            seed: 1,
        };
        let w = generate_workload(&ok).unwrap();
        assert_eq!(w.jobs.len(), 1);
        assert_eq!(w.jobs[0].shots, 100);
        for bad in [
            WorkloadProfile { n_users: 0, ..ok.clone() },
            WorkloadProfile { n_users: 2, ..ok.clone() },
            WorkloadProfile { total_shots: 0, ..ok.clone() },
            WorkloadProfile { window_s: 0.0, ..ok.clone() },
        ] {
            assert!(matches!(generate_workload(&bad), Err(WorkloadError::InfeasibleProfile(_))));
        }
    }

    #[test]
    fn default_profile_totals() {
        let w = generate_workload(&WorkloadProfile::table1()).unwrap();
        assert_eq!(w.jobs.len(), 364);
        assert_eq!(w.total_shots(), 2_533_588);
        assert_eq!(w.users().len(), 83);
        assert!(w.jobs.windows(2).all(|p| p[0].submit_at_s <= p[1].submit_at_s));
        let again = generate_workload(&WorkloadProfile::table1()).unwrap();
        assert_eq!(w.to_json(), again.to_json());
        assert_eq!(Workload::parse(&w.to_json()).unwrap(), w);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&[], 95.0), 0.0);
    }

    #[test]
    fn small_replay_accounts_every_shot() {
        let w = generate_workload(&WorkloadProfile {
            n_users: 3,
            n_jobs: 8,
            total_shots: 4000,
            window_s: 3600.0,
            seed: 9,
        })
        .unwrap();
        let out = run_replay(&w, &ReplayOptions::default()).unwrap();
        assert_eq!(out.report.jobs_completed, 8);
        assert_eq!(out.report.shots_committed, 4000);
        assert!((0.0..=1.0).contains(&out.report.utilization));
        assert!(out.accounting.check_invariants().is_empty());
    }
}
