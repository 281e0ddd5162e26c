//! Discrete-event model of the HPC workload manager.
//!
//! One CPU partition with a fixed number of slots plus one QPU partition
//! per gateway device. A QPU partition is open exactly while its device
//! reports `available`. Hybrid jobs run their classical phase in a CPU
//! slot, then wait for their device partition, then hand their batch to the
//! gateway. The CPU slot stays held until the QC phase finishes.
//!
//! The simulation is single threaded and fully determined by the submitted
//! jobs, the injected signals and the policy.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::Receiver;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{Accounting, AccountingError, JobMeta, ProjectState, Resource};
use crate::circuit::CircuitBatch;
use crate::gateway::{AvailabilityEvent, DailyWindow, DeviceState, Gateway, GatewayError, JobState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("unknown project `{0}`")]
    UnknownProject(String),
    #[error("project `{0}` is not approved")]
    ProjectNotApproved(String),
    #[error("quota pre-check failed for project `{project}`: {resource} needs {requested}, {headroom} left")]
    QuotaPrecheck {
        project: String,
        resource: Resource,
        requested: u64,
        headroom: u64,
    },
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("duplicate job id `{0}`")]
    DuplicateJob(String),
    #[error("device `{0}` is not mapped to a qpu partition")]
    UnmappedDevice(String),
    #[error("submission at {submitted_at} is earlier than the clock ({now})")]
    InPast { submitted_at: f64, now: f64 },
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Fifo,
    Fairshare,
    Timeslot,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Fifo => "fifo",
            Policy::Fairshare => "fairshare",
            Policy::Timeslot => "timeslot",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fifo" => Ok(Policy::Fifo),
            "fairshare" => Ok(Policy::Fairshare),
            "timeslot" => Ok(Policy::Timeslot),
            other => Err(format!("unknown policy `{other}` (fifo, fairshare, timeslot)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeJob {
    pub job_id: String,
    pub project_id: String,
    pub user: String,
    pub cpu_core_seconds: f64,
    /// Cores used by the job's single CPU slot.
    pub cores: u32,
    pub needs_qpu: bool,
    pub qc_batch: Option<CircuitBatch>,
    /// Target device; defaults to the first registered device.
    pub device_id: Option<String>,
    pub walltime_limit_s: f64,
    pub submitted_at: f64,
}

impl ComputeJob {
    pub fn classical_duration(&self) -> f64 {
        self.cpu_core_seconds / self.cores as f64
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        let bad = |m: &str| Err(SchedulerError::InvalidJob(format!("{}: {m}", self.job_id)));
        if self.needs_qpu != self.qc_batch.is_some() {
            return bad("qc_batch must be present iff needs_qpu");
        }
        if !(self.cpu_core_seconds > 0.0 && self.cpu_core_seconds.is_finite()) || self.cores == 0 {
            return bad("requested resources must be positive");
        }
        if !(self.walltime_limit_s > 0.0) {
            return bad("walltime limit must be positive");
        }
        if !self.submitted_at.is_finite() || self.submitted_at < 0.0 {
            return bad("submission time must be a finite non-negative number");
        }
        if let Some(b) = &self.qc_batch {
            b.validate().map_err(|e| SchedulerError::InvalidJob(format!("{}: {e}", self.job_id)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Cpu,
    Qpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    pub kind: PartitionKind,
    pub capacity: usize,
    pub state: PartitionState,
    pub running: usize,
}

/// Per-project (used, allocated) amounts by resource.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FairShareState {
    pub projects: BTreeMap<String, BTreeMap<Resource, (u64, u64)>>,
}

impl FairShareState {
    pub fn from_accounting(accounting: &Accounting, projects: impl IntoIterator<Item = String>) -> Self {
        let mut fs = FairShareState::default();
        for p in projects {
            if fs.projects.contains_key(&p) {
                continue;
            }
            let mut per = BTreeMap::new();
            for r in Resource::ALL {
                if let Ok(a) = accounting.allocation(&p, r) {
                    if a.granted > 0 {
                        per.insert(r, (a.used, a.granted));
                    }
                }
            }
            fs.projects.insert(p, per);
        }
        fs
    }

    /// Largest used/allocated ratio over the project's resources.
    pub fn dominant_ratio(&self, project_id: &str) -> f64 {
        self.projects
            .get(project_id)
            .map(|per| {
                per.values()
                    .map(|&(used, alloc)| used as f64 / alloc as f64)
                    .fold(0.0, f64::max)
            })
            .unwrap_or(0.0)
    }
}

/// Higher runs first. `NEG_INFINITY` marks a job that may not be
/// dispatched into `partition` now; the timeslot window only gates QPU
/// dispatch.
pub fn compute_priority(
    job: &ComputeJob,
    fs: &FairShareState,
    policy: Policy,
    window: &DailyWindow,
    now: f64,
    partition: PartitionKind,
) -> f64 {
    match policy {
        Policy::Fifo => -job.submitted_at,
        Policy::Fairshare => 1.0 / (1.0 + fs.dominant_ratio(&job.project_id)),
        Policy::Timeslot => {
            if partition == PartitionKind::Qpu && !window.contains(now) {
                f64::NEG_INFINITY
            } else {
                -job.submitted_at
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Submit,
    Rejected,
    DispatchCpu,
    CpuDone,
    DispatchQpu,
    QcStart,
    QcEnd,
    JobDone,
    JobFailed,
    PartitionOpen,
    PartitionClose,
}

impl TraceKind {
    pub fn name(self) -> &'static str {
        match self {
            TraceKind::Submit => "submit",
            TraceKind::Rejected => "rejected",
            TraceKind::DispatchCpu => "dispatch_cpu",
            TraceKind::CpuDone => "cpu_done",
            TraceKind::DispatchQpu => "dispatch_qpu",
            TraceKind::QcStart => "qc_start",
            TraceKind::QcEnd => "qc_end",
            TraceKind::JobDone => "job_done",
            TraceKind::JobFailed => "job_failed",
            TraceKind::PartitionOpen => "partition_open",
            TraceKind::PartitionClose => "partition_close",
        }
    }
}

impl FromStr for TraceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use TraceKind::*;
        [Submit, Rejected, DispatchCpu, CpuDone, DispatchQpu, QcStart, QcEnd, JobDone, JobFailed, PartitionOpen, PartitionClose]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown trace kind `{s}`"))
    }
}

/// `subject` is a job id, `job@device` for QPU events, or `qpu:device`
/// for partition transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: TraceKind,
    pub subject: String,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}\t{}\t{}", self.time, self.kind.name(), self.subject)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub events: Vec<TraceEvent>,
}

impl EventTrace {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split('\t');
            let (Some(t), Some(k), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(format!("line {}: expected 3 tab-separated fields", i + 1));
            };
            events.push(TraceEvent {
                time: t.parse().map_err(|e| format!("line {}: {e}", i + 1))?,
                kind: k.parse()?,
                subject: s.to_string(),
            });
        }
        Ok(Self { events })
    }
}

/// Snapshot of one dispatch decision, kept so the choice can be re-derived.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispatchRecord {
    pub time: f64,
    pub partition: String,
    pub chosen: String,
    /// (job_id, project_id, submitted_at) of every eligible job, chosen included.
    pub eligible: Vec<(String, String, f64)>,
    pub fairshare: FairShareState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobPhase {
    Arriving,
    Pending,
    Classical,
    AwaitingQpu,
    QcRunning,
    Done,
    Failed,
    Rejected,
}

impl JobPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobPhase::Done | JobPhase::Failed | JobPhase::Rejected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobRecord {
    pub job: ComputeJob,
    pub device_id: Option<String>,
    pub phase: JobPhase,
    pub started_at: Option<f64>,
    pub cpu_done_at: Option<f64>,
    pub qc_started_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub gateway_job: Option<String>,
    pub shots_used: u64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub policy: Policy,
    pub cpu_capacity: usize,
    /// Window used by the timeslot policy.
    pub window: DailyWindow,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Fifo,
            cpu_capacity: 16,
            window: DailyWindow::whole_day(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmitReceipt {
    pub job_id: String,
    /// 1-based position among jobs not yet dispatched.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    Arrive(String),
    CpuPhaseEnd(String),
    QcEnd(String),
    Walltime(String),
    Signal(String, DeviceState),
    WindowOpen,
}

#[derive(Debug, Clone)]
struct Scheduled {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

pub struct Scheduler {
    accounting: Arc<Accounting>,
    gateway: Arc<Gateway>,
    config: SchedulerConfig,
    signals: Receiver<AvailabilityEvent>,
    now: f64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    jobs: HashMap<String, JobRecord>,
    order: Vec<String>,
    cpu: Partition,
    qpu: BTreeMap<String, Partition>,
    cpu_reservations: HashMap<String, String>,
    window_wakeup: Option<f64>,
    trace: EventTrace,
    dispatches: Vec<DispatchRecord>,
}

fn cpu_units(core_seconds: f64) -> u64 {
    Resource::units_from_seconds(core_seconds).max(1)
}

impl Scheduler {
    /// Maps every gateway device to a QPU partition whose state follows
    /// the device's current status.
    pub fn new(accounting: Arc<Accounting>, gateway: Arc<Gateway>, config: SchedulerConfig) -> Result<Self, SchedulerError> {
        if config.cpu_capacity == 0 {
            return Err(SchedulerError::InvalidConfig("cpu capacity must be positive".into()));
        }
        config.window.validate().map_err(SchedulerError::InvalidConfig)?;
        let signals = gateway.subscribe();
        let mut qpu = BTreeMap::new();
        for id in gateway.device_ids() {
            let status = gateway.get_device_info(&id)?.status.status;
            qpu.insert(
                id.clone(),
                Partition {
                    name: format!("qpu:{id}"),
                    kind: PartitionKind::Qpu,
                    capacity: 1,
                    state: if status == DeviceState::Available {
                        PartitionState::Open
                    } else {
                        PartitionState::Closed
                    },
                    running: 0,
                },
            );
        }
        Ok(Self {
            accounting,
            gateway,
            signals,
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            jobs: HashMap::new(),
            order: Vec::new(),
            cpu: Partition {
                name: "cpu".into(),
                kind: PartitionKind::Cpu,
                capacity: config.cpu_capacity,
                state: PartitionState::Open,
                running: 0,
            },
            qpu,
            cpu_reservations: HashMap::new(),
            window_wakeup: None,
            trace: EventTrace::default(),
            dispatches: Vec::new(),
            config,
        })
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn trace(&self) -> &EventTrace {
        &self.trace
    }

    pub fn dispatches(&self) -> &[DispatchRecord] {
        &self.dispatches
    }

    pub fn partitions(&self) -> Vec<Partition> {
        std::iter::once(self.cpu.clone()).chain(self.qpu.values().cloned()).collect()
    }

    pub fn job(&self, job_id: &str) -> Option<&JobRecord> {
        self.jobs.get(job_id)
    }

    /// Records in submission-call order.
    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.order.iter().map(|id| &self.jobs[id])
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Scheduled {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn log(&mut self, kind: TraceKind, subject: impl Into<String>) {
        self.trace.events.push(TraceEvent {
            time: self.now,
            kind,
            subject: subject.into(),
        });
    }

    fn precheck(&self, job: &ComputeJob) -> Result<(), SchedulerError> {
        let map = |e: AccountingError| match e {
            AccountingError::QuotaExceeded {
                project,
                resource,
                requested,
                headroom,
            } => SchedulerError::QuotaPrecheck {
                project,
                resource,
                requested,
                headroom,
            },
            AccountingError::UnknownProject(p) => SchedulerError::UnknownProject(p),
            AccountingError::NotApproved(p) => SchedulerError::ProjectNotApproved(p),
            other => SchedulerError::InvalidJob(other.to_string()),
        };
        self.accounting
            .precheck(&job.project_id, Resource::CpuCoreSeconds, cpu_units(job.cpu_core_seconds))
            .map_err(map)?;
        if let Some(b) = &job.qc_batch {
            self.accounting
                .precheck(&job.project_id, Resource::Shots, b.total_shots())
                .map_err(map)?;
        }
        Ok(())
    }

    /// Registers a job arriving at `job.submitted_at`. Unknown projects and
    /// requests larger than the current headroom fail here.
    pub fn submit(&mut self, job: ComputeJob) -> Result<SubmitReceipt, SchedulerError> {
        job.validate()?;
        if self.jobs.contains_key(&job.job_id) {
            return Err(SchedulerError::DuplicateJob(job.job_id));
        }
        if job.submitted_at < self.now {
            return Err(SchedulerError::InPast {
                submitted_at: job.submitted_at,
                now: self.now,
            });
        }
        let project = self
            .accounting
            .project(&job.project_id)
            .map_err(|_| SchedulerError::UnknownProject(job.project_id.clone()))?;
        if project.state != ProjectState::Approved {
            return Err(SchedulerError::ProjectNotApproved(job.project_id.clone()));
        }
        if !project.members.contains(&job.user) {
            return Err(SchedulerError::InvalidJob(format!(
                "{}: user `{}` is not a member of `{}`",
                job.job_id, job.user, job.project_id
            )));
        }
        let device_id = if job.needs_qpu {
            let id = match &job.device_id {
                Some(id) => id.clone(),
                None => self
                    .qpu
                    .keys()
                    .next()
                    .cloned()
                    .ok_or_else(|| SchedulerError::UnmappedDevice("<none>".into()))?,
            };
            if !self.qpu.contains_key(&id) {
                return Err(SchedulerError::UnmappedDevice(id));
            }
            Some(id)
        } else {
            None
        };
        self.precheck(&job)?;
        let id = job.job_id.clone();
        let at = job.submitted_at;
        self.jobs.insert(
            id.clone(),
            JobRecord {
                job,
                device_id,
                phase: JobPhase::Arriving,
                started_at: None,
                cpu_done_at: None,
                qc_started_at: None,
                finished_at: None,
                gateway_job: None,
                shots_used: 0,
                failure: None,
            },
        );
        self.order.push(id.clone());
        self.push(at, EventKind::Arrive(id.clone()));
        let position = self
            .jobs
            .values()
            .filter(|r| matches!(r.phase, JobPhase::Arriving | JobPhase::Pending))
            .count();
        Ok(SubmitReceipt { job_id: id, position })
    }

    /// Queues a device status signal at virtual time `at`.
    pub fn inject_signal(&mut self, device_id: &str, status: DeviceState, at: f64) -> Result<(), SchedulerError> {
        if !self.qpu.contains_key(device_id) {
            return Err(SchedulerError::UnmappedDevice(device_id.into()));
        }
        self.push(at.max(self.now), EventKind::Signal(device_id.into(), status));
        Ok(())
    }

    /// available opens the partition, anything else closes it. Returns
    /// whether the partition changed.
    pub fn on_device_signal(&mut self, device_id: &str, status: DeviceState) -> Result<bool, SchedulerError> {
        let part = self
            .qpu
            .get_mut(device_id)
            .ok_or_else(|| SchedulerError::UnmappedDevice(device_id.into()))?;
        let target = if status == DeviceState::Available {
            PartitionState::Open
        } else {
            PartitionState::Closed
        };
        if part.state == target {
            return Ok(false);
        }
        part.state = target;
        let subject = part.name.clone();
        let kind = if target == PartitionState::Open {
            TraceKind::PartitionOpen
        } else {
            TraceKind::PartitionClose
        };
        self.log(kind, subject);
        Ok(true)
    }

    fn fold_signals(&mut self) -> Result<(), SchedulerError> {
        while let Ok(ev) = self.signals.try_recv() {
            if self.qpu.contains_key(&ev.device_id) {
                self.on_device_signal(&ev.device_id, ev.status)?;
            }
        }
        Ok(())
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Advances to the next event time, processes every event due then and
    /// dispatches. Returns the trace entries produced, or `None` once no
    /// events remain.
    pub fn step(&mut self) -> Result<Option<Vec<TraceEvent>>, SchedulerError> {
        // a walltime timer of a job that already moved on must not drag the clock
        while let Some(EventKind::Walltime(id)) = self.queue.peek().map(|e| &e.kind) {
            if matches!(self.jobs[id].phase, JobPhase::Classical | JobPhase::AwaitingQpu) {
                break;
            }
            self.queue.pop();
        }
        let Some(next) = self.queue.peek().map(|e| e.time) else {
            return Ok(None);
        };
        let mark = self.trace.events.len();
        self.now = next;
        while self.queue.peek().is_some_and(|e| e.time == next) {
            let ev = self.queue.pop().expect("peeked");
            self.handle(ev.kind)?;
        }
        self.fold_signals()?;
        self.dispatch()?;
        Ok(Some(self.trace.events[mark..].to_vec()))
    }

    pub fn run(&mut self) -> Result<(), SchedulerError> {
        while self.step()?.is_some() {}
        Ok(())
    }

    fn handle(&mut self, kind: EventKind) -> Result<(), SchedulerError> {
        match kind {
            EventKind::Arrive(id) => {
                self.log(TraceKind::Submit, id.clone());
                let job = self.jobs[&id].job.clone();
                match self.precheck(&job) {
                    Ok(()) => self.jobs.get_mut(&id).expect("known").phase = JobPhase::Pending,
                    Err(e) => {
                        let rec = self.jobs.get_mut(&id).expect("known");
                        rec.phase = JobPhase::Rejected;
                        rec.failure = Some(format!("quota_exceeded: {e}"));
                        rec.finished_at = Some(self.now);
                        self.log(TraceKind::Rejected, id);
                    }
                }
            }
            EventKind::CpuPhaseEnd(id) => {
                let rec = self.jobs.get_mut(&id).expect("known");
                if rec.phase != JobPhase::Classical {
                    return Ok(());
                }
                rec.cpu_done_at = Some(self.now);
                if rec.job.needs_qpu {
                    rec.phase = JobPhase::AwaitingQpu;
                    self.log(TraceKind::CpuDone, id);
                } else {
                    self.finish(&id, None)?;
                }
            }
            EventKind::QcEnd(id) => {
                let device = self.jobs[&id].device_id.clone().expect("hybrid job");
                self.qpu.get_mut(&device).expect("mapped").running -= 1;
                self.log(TraceKind::QcEnd, format!("{id}@{device}"));
                let gw_job = self.jobs[&id].gateway_job.clone().expect("submitted");
                let res = self.gateway.fetch_results(&gw_job)?;
                let failure = match res.state {
                    JobState::Done => {
                        let rec = self.jobs.get_mut(&id).expect("known");
                        rec.shots_used = res.usage.map(|u| u.shots).unwrap_or(0);
                        None
                    }
                    _ => Some(res.reason.unwrap_or_else(|| "qc phase failed".into())),
                };
                self.finish(&id, failure)?;
            }
            EventKind::Walltime(id) => {
                let phase = self.jobs[&id].phase;
                if matches!(phase, JobPhase::Classical | JobPhase::AwaitingQpu) {
                    self.finish(&id, Some("walltime".into()))?;
                }
            }
            EventKind::Signal(device, status) => {
                self.gateway.signal_status(&device, status, self.now)?;
                self.fold_signals()?;
            }
            EventKind::WindowOpen => self.window_wakeup = None,
        }
        Ok(())
    }

    /// Terminal transition; frees the CPU slot and settles CPU usage.
    fn finish(&mut self, id: &str, failure: Option<String>) -> Result<(), SchedulerError> {
        let now = self.now;
        let rec = self.jobs.get_mut(id).expect("known");
        let started = rec.started_at.expect("dispatched");
        let classical_end = rec.cpu_done_at.unwrap_or(now);
        let consumed = ((classical_end - started) * rec.job.cores as f64).min(rec.job.cpu_core_seconds);
        rec.phase = if failure.is_some() { JobPhase::Failed } else { JobPhase::Done };
        rec.finished_at = Some(now);
        rec.failure = failure.clone();
        self.cpu.running -= 1;
        if let Some(res) = self.cpu_reservations.remove(id) {
            let held = self.accounting.reservation(&res).map_err(|e| SchedulerError::InvalidJob(e.to_string()))?.amount;
            let amount = Resource::units_from_seconds(consumed).min(held);
            let outcome = if amount == 0 {
                self.accounting.release(&res)
            } else {
                self.accounting
                    .commit_usage(
                        &res,
                        amount,
                        &JobMeta {
                            job_id: id.to_string(),
                            started_at: started,
                            finished_at: now,
                        },
                    )
                    .map(|_| ())
            };
            outcome.map_err(|e| SchedulerError::InvalidJob(e.to_string()))?;
        }
        self.log(
            if failure.is_some() {
                TraceKind::JobFailed
            } else {
                TraceKind::JobDone
            },
            id.to_string(),
        );
        Ok(())
    }

    fn fairshare_state(&self, ids: &[String]) -> FairShareState {
        FairShareState::from_accounting(&self.accounting, ids.iter().map(|id| self.jobs[id].job.project_id.clone()))
    }

    /// Highest priority job among `ids`, ties to the earlier submission
    /// (then the earlier submit call).
    fn choose(&mut self, ids: Vec<String>, partition: &str, kind: PartitionKind) -> Option<String> {
        if ids.is_empty() {
            return None;
        }
        let fs = self.fairshare_state(&ids);
        let rank: HashMap<&String, usize> = self.order.iter().enumerate().map(|(i, id)| (id, i)).collect();
        let mut best: Option<(f64, f64, usize, &String)> = None;
        for id in &ids {
            let job = &self.jobs[id].job;
            let score = compute_priority(job, &fs, self.config.policy, &self.config.window, self.now, kind);
            if score == f64::NEG_INFINITY {
                continue;
            }
            let key = (score, job.submitted_at, rank[id], id);
            let better = match &best {
                None => true,
                Some((s, t, r, _)) => score > *s || (score == *s && (job.submitted_at, rank[id]) < (*t, *r)),
            };
            if better {
                best = Some(key);
            }
        }
        let chosen = best.map(|b| b.3.clone())?;
        let eligible = ids
            .iter()
            .filter(|id| {
                compute_priority(&self.jobs[*id].job, &fs, self.config.policy, &self.config.window, self.now, kind)
                    != f64::NEG_INFINITY
            })
            .map(|id| {
                let j = &self.jobs[id].job;
                (id.clone(), j.project_id.clone(), j.submitted_at)
            })
            .collect();
        self.dispatches.push(DispatchRecord {
            time: self.now,
            partition: partition.into(),
            chosen: chosen.clone(),
            eligible,
            fairshare: fs,
        });
        Some(chosen)
    }

    fn ids_in(&self, phase: JobPhase, device: Option<&str>) -> Vec<String> {
        self.order
            .iter()
            .filter(|id| {
                let r = &self.jobs[*id];
                r.phase == phase && (device.is_none() || r.device_id.as_deref() == device)
            })
            .cloned()
            .collect()
    }

    fn dispatch(&mut self) -> Result<(), SchedulerError> {
        loop {
            let mut progressed = false;
            let devices: Vec<String> = self.qpu.keys().cloned().collect();
            for d in devices {
                let part = &self.qpu[&d];
                if part.state != PartitionState::Open || part.running >= part.capacity {
                    continue;
                }
                let waiting = self.ids_in(JobPhase::AwaitingQpu, Some(&d));
                if waiting.is_empty() {
                    continue;
                }
                match self.choose(waiting, &format!("qpu:{d}"), PartitionKind::Qpu) {
                    Some(id) => {
                        self.start_qc(&id, &d)?;
                        progressed = true;
                    }
                    None => self.schedule_window_wakeup(),
                }
            }
            if self.cpu.running < self.cpu.capacity {
                let pending = self.ids_in(JobPhase::Pending, None);
                if let Some(id) = self.choose(pending, "cpu", PartitionKind::Cpu) {
                    self.start_cpu(&id);
                    progressed = true;
                }
            }
            if !progressed {
                return Ok(());
            }
        }
    }

    fn schedule_window_wakeup(&mut self) {
        let at = self.config.window.next_open(self.now);
        if at > self.now && self.window_wakeup.is_none_or(|w| w > at) {
            self.window_wakeup = Some(at);
            self.push(at, EventKind::WindowOpen);
        }
    }

    fn start_cpu(&mut self, id: &str) {
        let now = self.now;
        self.cpu.running += 1;
        self.log(TraceKind::DispatchCpu, id.to_string());
        let rec = self.jobs.get_mut(id).expect("known");
        rec.started_at = Some(now);
        let job = rec.job.clone();
        match self
            .accounting
            .reserve(&job.project_id, Resource::CpuCoreSeconds, cpu_units(job.cpu_core_seconds))
        {
            Ok(res) => {
                self.cpu_reservations.insert(id.to_string(), res);
                self.jobs.get_mut(id).expect("known").phase = JobPhase::Classical;
                let walltime_at = now + job.walltime_limit_s;
                let end = now + job.classical_duration();
                if end > walltime_at {
                    self.push(walltime_at, EventKind::Walltime(id.to_string()));
                } else {
                    self.push(end, EventKind::CpuPhaseEnd(id.to_string()));
                    if job.needs_qpu {
                        self.push(walltime_at, EventKind::Walltime(id.to_string()));
                    }
                }
            }
            Err(e) => {
                self.jobs.get_mut(id).expect("known").phase = JobPhase::Classical;
                // no reservation, so finish only frees the slot
                let _ = self.finish(id, Some(format!("quota_exceeded: {e}")));
            }
        }
    }

    fn start_qc(&mut self, id: &str, device: &str) -> Result<(), SchedulerError> {
        let now = self.now;
        self.log(TraceKind::DispatchQpu, format!("{id}@{device}"));
        let job = self.jobs[id].job.clone();
        let token = format!("scheduler:{}:{}", job.user, job.project_id);
        self.accounting
            .register_token(&token, &job.user, &job.project_id)
            .map_err(|e| SchedulerError::InvalidJob(e.to_string()))?;
        let batch = job.qc_batch.clone().expect("hybrid job");
        let doc = self.gateway.submit_job(device, batch, &job.project_id, &token, now)?;
        self.jobs.get_mut(id).expect("known").gateway_job = Some(doc.job_id.clone());
        if doc.state == JobState::Rejected {
            let reason = doc.reason.unwrap_or_default();
            return self.finish(id, Some(reason));
        }
        let Some(gw) = self.gateway.process_queue_step(device, now)? else {
            return Err(SchedulerError::InvalidJob(format!(
                "{id}: device `{device}` did not start the job although its partition is open"
            )));
        };
        self.qpu.get_mut(device).expect("mapped").running += 1;
        let rec = self.jobs.get_mut(id).expect("known");
        rec.phase = JobPhase::QcRunning;
        rec.qc_started_at = Some(now);
        self.log(TraceKind::QcStart, format!("{id}@{device}"));
        let end = gw.finished_at.unwrap_or(now);
        self.push(end, EventKind::QcEnd(id.to_string()));
        Ok(())
    }
}
