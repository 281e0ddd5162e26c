//! The QC-site gateway: device registry, admission policy, strict FIFO
//! execution per device and availability broadcasts.
//!
//! Time is always supplied by the caller, so the same gateway serves a live
//! HTTP front end (wall-clock seconds) and the discrete-event scheduler
//! (virtual seconds). A device is busy from a job's start until its
//! computed finish time; no other job starts on it in between.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{Accounting, AccountingError, JobMeta, Resource};
use crate::backend::{
    derive_seed, sample_counts, BackendError, CalibrationSnapshot, CountsMap, DeviceRegistry, DeviceSpec,
    NoiseMode,
};
use crate::circuit::{validate_circuit, CircuitBatch, QuantumCircuit};
use crate::transpiler::{transpile, TranspileError, TranspiledCircuit};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("unknown project `{0}`")]
    UnknownProject(String),
    #[error("unknown job `{0}`")]
    UnknownJob(String),
    #[error("credentials do not grant access to project `{0}`")]
    Unauthorized(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Transpile(#[from] TranspileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceState {
    Available,
    Calibrating,
    Maintenance,
    Offline,
}

impl DeviceState {
    pub fn name(self) -> &'static str {
        match self {
            DeviceState::Available => "available",
            DeviceState::Calibrating => "calibrating",
            DeviceState::Maintenance => "maintenance",
            DeviceState::Offline => "offline",
        }
    }

    /// Whether submissions are admitted. Calibration is a short pause, so
    /// jobs still queue during it.
    pub fn accepts_submissions(self) -> bool {
        matches!(self, DeviceState::Available | DeviceState::Calibrating)
    }
}

impl fmt::Display for DeviceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DeviceState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "available" => Ok(DeviceState::Available),
            "calibrating" => Ok(DeviceState::Calibrating),
            "maintenance" => Ok(DeviceState::Maintenance),
            "offline" => Ok(DeviceState::Offline),
            other => Err(format!("unknown device status `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceStatus {
    pub device_id: String,
    pub status: DeviceState,
    pub calibration: CalibrationSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub spec: DeviceSpec,
    pub status: DeviceStatus,
    pub queue_length: usize,
}

/// Daily `[start_s, end_s)` window in seconds after midnight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyWindow {
    pub start_s: f64,
    pub end_s: f64,
}

impl DailyWindow {
    pub fn whole_day() -> Self {
        Self {
            start_s: 0.0,
            end_s: SECONDS_PER_DAY,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        let tod = t.rem_euclid(SECONDS_PER_DAY);
        tod >= self.start_s && tod < self.end_s
    }

    /// Earliest instant ≥ `t` inside the window.
    pub fn next_open(&self, t: f64) -> f64 {
        if self.contains(t) {
            return t;
        }
        let day = (t / SECONDS_PER_DAY).floor() * SECONDS_PER_DAY;
        let today = day + self.start_s;
        if today >= t {
            today
        } else {
            today + SECONDS_PER_DAY
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 <= self.start_s && self.start_s < self.end_s && self.end_s <= SECONDS_PER_DAY) {
            return Err(format!("window [{}, {}) is not within one day", self.start_s, self.end_s));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayPolicy {
    pub window: DailyWindow,
    pub max_jobs_per_user_per_day: u64,
    pub max_job_walltime_s: f64,
    pub max_shots_per_job: u64,
}

impl Default for GatewayPolicy {
    fn default() -> Self {
        Self::unlimited()
    }
}

impl GatewayPolicy {
    pub fn unlimited() -> Self {
        Self {
            window: DailyWindow::whole_day(),
            max_jobs_per_user_per_day: u64::MAX,
            max_job_walltime_s: f64::INFINITY,
            max_shots_per_job: u64::MAX,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        self.window.validate().map_err(GatewayError::InvalidPolicy)?;
        if self.max_jobs_per_user_per_day == 0 || self.max_shots_per_job == 0 || !(self.max_job_walltime_s > 0.0) {
            return Err(GatewayError::InvalidPolicy("limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub policy: GatewayPolicy,
    pub seed: u64,
    pub noisy: bool,
    /// Terminal jobs kept for status/result queries.
    pub retention: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            policy: GatewayPolicy::unlimited(),
            seed: 0,
            noisy: true,
            retention: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Executing,
    Done,
    Failed,
    Rejected,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Rejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    DeviceUnavailable,
    OutsideWindow,
    UserLimit,
    QuotaExceeded,
    InvalidCircuit,
    Walltime,
}

impl RejectReason {
    pub fn name(self) -> &'static str {
        match self {
            RejectReason::DeviceUnavailable => "device_unavailable",
            RejectReason::OutsideWindow => "outside_window",
            RejectReason::UserLimit => "user_limit",
            RejectReason::QuotaExceeded => "quota_exceeded",
            RejectReason::InvalidCircuit => "invalid_circuit",
            RejectReason::Walltime => "walltime",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobUsage {
    pub shots: u64,
    pub qpu_seconds: f64,
    pub started_at: f64,
    pub finished_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QcJob {
    pub job_id: String,
    pub device_id: String,
    pub batch: CircuitBatch,
    pub project_id: String,
    pub submitter: String,
    pub state: JobState,
    pub submitted_at: f64,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub result: Option<Vec<CountsMap>>,
    pub usage: Option<JobUsage>,
    pub rejection: Option<RejectReason>,
    pub failure: Option<String>,
}

/// Job document returned on submission and status queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobDocument {
    pub job_id: String,
    pub state: JobState,
    /// 1-based position in the device queue while queued.
    pub queue_position: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

/// Result document: counts per circuit plus usage once done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub job_id: String,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub counts: Option<Vec<CountsMap>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub usage: Option<JobUsage>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityEvent {
    pub seq: u64,
    pub device_id: String,
    pub status: DeviceState,
    /// True when the device became available (the scheduler opens its partition).
    pub open: bool,
    pub at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalAck {
    pub device_id: String,
    pub status: DeviceState,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatewayEventKind {
    Accepted,
    Rejected { reason: RejectReason },
    Started,
    Finished,
    Failed,
    Status { status: DeviceState },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatewayEvent {
    pub seq: u64,
    pub time: f64,
    pub device_id: String,
    pub job_id: Option<String>,
    pub kind: GatewayEventKind,
}

struct JobRecord {
    job: QcJob,
    transpiled: Vec<TranspiledCircuit>,
    qpu_seconds: f64,
    shots_reservation: Option<String>,
    qpu_reservation: Option<String>,
    seed: u64,
}

struct DeviceRuntime {
    status: DeviceState,
    queue: VecDeque<String>,
    executing: Option<String>,
    busy_until: f64,
}

#[derive(Default)]
struct GatewayState {
    devices: BTreeMap<String, DeviceRuntime>,
    jobs: HashMap<String, JobRecord>,
    next_job: u64,
    terminal: VecDeque<String>,
    daily: HashMap<(String, i64), u64>,
    events: Vec<AvailabilityEvent>,
    trace: Vec<GatewayEvent>,
    next_trace: u64,
}

impl GatewayState {
    fn record(&mut self, time: f64, device_id: &str, job_id: Option<&str>, kind: GatewayEventKind) {
        self.next_trace += 1;
        self.trace.push(GatewayEvent {
            seq: self.next_trace,
            time,
            device_id: device_id.into(),
            job_id: job_id.map(str::to_string),
            kind,
        });
    }

    fn retire(&mut self, job_id: &str, retention: usize) {
        self.terminal.push_back(job_id.into());
        while self.terminal.len() > retention {
            if let Some(old) = self.terminal.pop_front() {
                self.jobs.remove(&old);
            }
        }
    }

    fn queue_position(&self, job: &QcJob) -> Option<usize> {
        if job.state != JobState::Queued {
            return None;
        }
        self.devices
            .get(&job.device_id)
            .and_then(|d| d.queue.iter().position(|id| *id == job.job_id))
            .map(|p| p + 1)
    }
}

pub struct Gateway {
    registry: DeviceRegistry,
    accounting: Arc<Accounting>,
    config: GatewayConfig,
    state: Mutex<GatewayState>,
    work: Condvar,
    subscribers: Mutex<Vec<Sender<AvailabilityEvent>>>,
}

/// Reorders a bitstring over physical measured qubits (ascending physical
/// index) into logical order.
fn to_logical(counts: CountsMap, readout: &[(usize, usize)]) -> CountsMap {
    let mut physical: Vec<usize> = readout.iter().map(|&(_, p)| p).collect();
    physical.sort_unstable();
    let pos: Vec<usize> = readout
        .iter()
        .map(|&(_, p)| physical.binary_search(&p).expect("measured physical qubit"))
        .collect();
    let mut out = CountsMap::new();
    for (bits, n) in counts {
        let b = bits.as_bytes();
        let logical: String = pos.iter().map(|&i| b[i] as char).collect();
        *out.entry(logical).or_insert(0) += n;
    }
    out
}

/// Transpiles `c` for `spec`, samples it and reports counts over the
/// logical measured qubits. This is what the gateway does per circuit.
pub fn execute_logical(
    c: &QuantumCircuit,
    shots: u64,
    spec: &DeviceSpec,
    seed: u64,
    mode: NoiseMode,
) -> Result<CountsMap, GatewayError> {
    let t = transpile(c, spec)?;
    let counts = sample_counts(&t.circuit, shots, spec, seed, mode)?;
    Ok(to_logical(counts, &t.logical_readout(c)))
}

impl Gateway {
    pub fn new(accounting: Arc<Accounting>, config: GatewayConfig) -> Result<Self, GatewayError> {
        config.policy.validate()?;
        Ok(Self {
            registry: DeviceRegistry::new(),
            accounting,
            config,
            state: Mutex::new(GatewayState::default()),
            work: Condvar::new(),
            subscribers: Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn accounting(&self) -> &Arc<Accounting> {
        &self.accounting
    }

    /// New devices start offline until their first status signal.
    pub fn register_device(&self, spec: DeviceSpec) -> Result<String, GatewayError> {
        let mut st = self.state.lock();
        let id = self.registry.register(spec)?;
        st.devices.insert(
            id.clone(),
            DeviceRuntime {
                status: DeviceState::Offline,
                queue: VecDeque::new(),
                executing: None,
                busy_until: f64::NEG_INFINITY,
            },
        );
        Ok(id)
    }

    pub fn device_ids(&self) -> Vec<String> {
        self.registry.ids()
    }

    pub fn get_device_info(&self, device_id: &str) -> Result<DeviceInfo, GatewayError> {
        let st = self.state.lock();
        let rt = st
            .devices
            .get(device_id)
            .ok_or_else(|| GatewayError::UnknownDevice(device_id.into()))?;
        let spec = self.registry.get(device_id)?;
        Ok(DeviceInfo {
            status: DeviceStatus {
                device_id: device_id.into(),
                status: rt.status,
                calibration: spec.calibration.clone(),
            },
            queue_length: rt.queue.len(),
            spec,
        })
    }

    pub fn calibration(&self, device_id: &str) -> Result<CalibrationSnapshot, GatewayError> {
        Ok(self.registry.get(device_id)?.calibration)
    }

    /// Draws and publishes a fresh calibration snapshot.
    pub fn calibrate(&self, device_id: &str, seed: u64, now: f64) -> Result<CalibrationSnapshot, GatewayError> {
        Ok(self.registry.generate_calibration_snapshot(device_id, seed, now)?)
    }

    pub fn set_calibration(&self, device_id: &str, snapshot: CalibrationSnapshot) -> Result<(), GatewayError> {
        Ok(self.registry.set_calibration(device_id, snapshot)?)
    }

    pub fn subscribe(&self) -> Receiver<AvailabilityEvent> {
        let (tx, rx) = channel();
        self.subscribers.lock().push(tx);
        rx
    }

    /// Availability events with `seq > after`, for polling clients.
    pub fn events_since(&self, after: u64) -> Vec<AvailabilityEvent> {
        self.state
            .lock()
            .events
            .iter()
            .filter(|e| e.seq > after)
            .cloned()
            .collect()
    }

    pub fn signal_status(&self, device_id: &str, status: DeviceState, now: f64) -> Result<SignalAck, GatewayError> {
        let event = {
            let mut st = self.state.lock();
            let rt = st
                .devices
                .get_mut(device_id)
                .ok_or_else(|| GatewayError::UnknownDevice(device_id.into()))?;
            if rt.status == status {
                return Ok(SignalAck {
                    device_id: device_id.into(),
                    status,
                    changed: false,
                });
            }
            rt.status = status;
            let event = AvailabilityEvent {
                seq: st.events.len() as u64 + 1,
                device_id: device_id.into(),
                status,
                open: status == DeviceState::Available,
                at: now,
            };
            st.events.push(event.clone());
            st.record(now, device_id, None, GatewayEventKind::Status { status });
            event
        };
        self.subscribers.lock().retain(|tx| tx.send(event.clone()).is_ok());
        self.work.notify_all();
        Ok(SignalAck {
            device_id: device_id.into(),
            status,
            changed: true,
        })
    }

    /// Admits or rejects a batch. Hard errors (unknown device or project,
    /// bad credentials) are `Err`; policy rejections are a rejected job.
    pub fn submit_job(
        &self,
        device_id: &str,
        batch: CircuitBatch,
        project_id: &str,
        token: &str,
        now: f64,
    ) -> Result<JobDocument, GatewayError> {
        let identity = self
            .accounting
            .authenticate(token)
            .map_err(|_| GatewayError::Unauthorized(project_id.into()))?;
        let project = self.accounting.project(project_id).map_err(|e| match e {
            AccountingError::UnknownProject(p) => GatewayError::UnknownProject(p),
            other => GatewayError::Accounting(other),
        })?;
        if identity.project_id != project_id || !project.members.contains(&identity.user) {
            return Err(GatewayError::Unauthorized(project_id.into()));
        }

        let mut st = self.state.lock();
        let status = st
            .devices
            .get(device_id)
            .ok_or_else(|| GatewayError::UnknownDevice(device_id.into()))?
            .status;
        let spec = self.registry.get(device_id)?;
        st.next_job += 1;
        let job_id = format!("job-{:06}", st.next_job);
        let seed = derive_seed(self.config.seed, st.next_job);
        let policy = &self.config.policy;
        let day = (now / SECONDS_PER_DAY).floor() as i64;
        let user_key = (identity.user.clone(), day);

        let mut transpiled = Vec::new();
        let mut qpu_seconds = 0.0;
        let admission: Result<(), RejectReason> = (|| {
            if !status.accepts_submissions() {
                return Err(RejectReason::DeviceUnavailable);
            }
            if !policy.window.contains(now) {
                return Err(RejectReason::OutsideWindow);
            }
            if batch.validate().is_err() {
                return Err(RejectReason::InvalidCircuit);
            }
            for c in &batch.circuits {
                if validate_circuit(c, &spec).has_hard_violation() {
                    return Err(RejectReason::InvalidCircuit);
                }
                if c.measured_qubits().is_empty() {
                    return Err(RejectReason::InvalidCircuit);
                }
                let t = transpile(c, &spec).map_err(|_| RejectReason::InvalidCircuit)?;
                qpu_seconds += spec.gate_durations_ns.circuit_duration_s(&t.circuit) * batch.shots as f64;
                transpiled.push(t);
            }
            if qpu_seconds > policy.max_job_walltime_s {
                return Err(RejectReason::Walltime);
            }
            if batch.total_shots() > policy.max_shots_per_job {
                return Err(RejectReason::UserLimit);
            }
            if st.daily.get(&user_key).copied().unwrap_or(0) >= policy.max_jobs_per_user_per_day {
                return Err(RejectReason::UserLimit);
            }
            Ok(())
        })();

        let mut reservations = (None, None);
        let admission = admission.and_then(|()| {
            let shots = self
                .accounting
                .reserve(project_id, Resource::Shots, batch.total_shots())
                .map_err(|_| RejectReason::QuotaExceeded)?;
            let qpu_units = Resource::units_from_seconds(qpu_seconds).max(1);
            match self.accounting.reserve(project_id, Resource::QpuSeconds, qpu_units) {
                Ok(qpu) => {
                    reservations = (Some(shots), Some(qpu));
                    Ok(())
                }
                Err(_) => {
                    let _ = self.accounting.release(&shots);
                    Err(RejectReason::QuotaExceeded)
                }
            }
        });

        let mut job = QcJob {
            job_id: job_id.clone(),
            device_id: device_id.into(),
            batch,
            project_id: project_id.into(),
            submitter: identity.user.clone(),
            state: JobState::Queued,
            submitted_at: now,
            started_at: None,
            finished_at: None,
            result: None,
            usage: None,
            rejection: None,
            failure: None,
        };

        let doc = match admission {
            Ok(()) => {
                *st.daily.entry(user_key).or_insert(0) += 1;
                let rt = st.devices.get_mut(device_id).expect("checked above");
                rt.queue.push_back(job_id.clone());
                let position = rt.queue.len();
                st.record(now, device_id, Some(&job_id), GatewayEventKind::Accepted);
                JobDocument {
                    job_id: job_id.clone(),
                    state: JobState::Queued,
                    queue_position: Some(position),
                    reason: None,
                }
            }
            Err(reason) => {
                job.state = JobState::Rejected;
                job.rejection = Some(reason);
                st.record(now, device_id, Some(&job_id), GatewayEventKind::Rejected { reason });
                JobDocument {
                    job_id: job_id.clone(),
                    state: JobState::Rejected,
                    queue_position: None,
                    reason: Some(reason.name().into()),
                }
            }
        };

        let rejected = job.state == JobState::Rejected;
        st.jobs.insert(
            job_id.clone(),
            JobRecord {
                job,
                transpiled,
                qpu_seconds,
                shots_reservation: reservations.0,
                qpu_reservation: reservations.1,
                seed,
            },
        );
        if rejected {
            st.retire(&job_id, self.config.retention);
        }
        drop(st);
        self.work.notify_all();
        Ok(doc)
    }

    /// Earliest time the device can start its next job.
    pub fn busy_until(&self, device_id: &str) -> Result<f64, GatewayError> {
        self.state
            .lock()
            .devices
            .get(device_id)
            .map(|d| d.busy_until)
            .ok_or_else(|| GatewayError::UnknownDevice(device_id.into()))
    }

    pub fn queue_length(&self, device_id: &str) -> Result<usize, GatewayError> {
        self.state
            .lock()
            .devices
            .get(device_id)
            .map(|d| d.queue.len())
            .ok_or_else(|| GatewayError::UnknownDevice(device_id.into()))
    }

    /// Runs the head of the device queue if the device is available and
    /// idle at `now`. The job starts at `now` and finishes after its total
    /// circuit duration.
    pub fn process_queue_step(&self, device_id: &str, now: f64) -> Result<Option<QcJob>, GatewayError> {
        let (job_id, transpiled, batch, seed, qpu_seconds, spec) = {
            let mut st = self.state.lock();
            let rt = st
                .devices
                .get_mut(device_id)
                .ok_or_else(|| GatewayError::UnknownDevice(device_id.into()))?;
            if rt.status != DeviceState::Available || rt.executing.is_some() || now < rt.busy_until {
                return Ok(None);
            }
            let Some(job_id) = rt.queue.pop_front() else {
                return Ok(None);
            };
            rt.executing = Some(job_id.clone());
            st.record(now, device_id, Some(&job_id), GatewayEventKind::Started);
            let rec = st.jobs.get_mut(&job_id).expect("queued job exists");
            rec.job.state = JobState::Executing;
            rec.job.started_at = Some(now);
            (
                job_id,
                rec.transpiled.clone(),
                rec.job.batch.clone(),
                rec.seed,
                rec.qpu_seconds,
                self.registry.get(device_id)?,
            )
        };

        let mode = NoiseMode::from_flag(self.config.noisy);
        let outcome: Result<Vec<CountsMap>, BackendError> = transpiled
            .iter()
            .zip(&batch.circuits)
            .enumerate()
            .map(|(i, (t, original))| {
                let counts = sample_counts(&t.circuit, batch.shots, &spec, derive_seed(seed, i as u64), mode)?;
                Ok(to_logical(counts, &t.logical_readout(original)))
            })
            .collect();

        let finished_at = now + qpu_seconds;
        let mut st = self.state.lock();
        let rec = st.jobs.get_mut(&job_id).expect("executing job exists");
        let meta = JobMeta {
            job_id: job_id.clone(),
            started_at: now,
            finished_at,
        };
        let shots_res = rec.shots_reservation.take();
        let qpu_res = rec.qpu_reservation.take();
        let kind = match outcome {
            Ok(counts) => {
                let shots = batch.total_shots();
                let committed = shots_res
                    .as_deref()
                    .map(|r| self.accounting.commit_usage(r, shots, &meta))
                    .transpose()
                    .and_then(|_| {
                        qpu_res
                            .as_deref()
                            .map(|r| {
                                let held = self.accounting.reservation(r)?.amount;
                                let used = Resource::units_from_seconds(qpu_seconds).max(1).min(held);
                                self.accounting.commit_usage(r, used, &meta)
                            })
                            .transpose()
                    });
                match committed {
                    Ok(_) => {
                        rec.job.state = JobState::Done;
                        rec.job.result = Some(counts);
                        rec.job.usage = Some(JobUsage {
                            shots,
                            qpu_seconds,
                            started_at: now,
                            finished_at,
                        });
                        GatewayEventKind::Finished
                    }
                    Err(e) => {
                        rec.job.state = JobState::Failed;
                        rec.job.failure = Some(e.to_string());
                        GatewayEventKind::Failed
                    }
                }
            }
            Err(e) => {
                for r in [shots_res, qpu_res].into_iter().flatten() {
                    let _ = self.accounting.release(&r);
                }
                rec.job.state = JobState::Failed;
                rec.job.failure = Some(e.to_string());
                GatewayEventKind::Failed
            }
        };
        rec.job.finished_at = Some(finished_at);
        let job = rec.job.clone();
        let rt = st.devices.get_mut(device_id).expect("device exists");
        rt.executing = None;
        rt.busy_until = finished_at;
        st.record(finished_at, device_id, Some(&job_id), kind);
        st.retire(&job_id, self.config.retention);
        drop(st);
        self.work.notify_all();
        Ok(Some(job))
    }

    /// Processes the queue back to back in virtual time, starting at
    /// `start`, until it empties or the device stops being available.
    pub fn run_until_idle(&self, device_id: &str, start: f64) -> Result<Vec<QcJob>, GatewayError> {
        let mut done = Vec::new();
        let mut now = start;
        loop {
            now = now.max(self.busy_until(device_id)?);
            match self.process_queue_step(device_id, now)? {
                Some(job) => done.push(job),
                None => return Ok(done),
            }
        }
    }

    /// Live executor loop for one device; `clock` returns wall seconds.
    /// Returns once `stop` is set.
    pub fn run_executor(&self, device_id: &str, clock: impl Fn() -> f64, stop: &AtomicBool) -> Result<(), GatewayError> {
        while !stop.load(Ordering::Relaxed) {
            let now = clock();
            let busy = self.busy_until(device_id)?;
            if now < busy {
                std::thread::sleep(Duration::from_secs_f64((busy - now).min(0.05)));
                continue;
            }
            if self.process_queue_step(device_id, now)?.is_none() {
                let mut st = self.state.lock();
                self.work.wait_for(&mut st, Duration::from_millis(50));
            }
        }
        Ok(())
    }

    fn with_job<T>(&self, job_id: &str, f: impl FnOnce(&GatewayState, &QcJob) -> T) -> Result<T, GatewayError> {
        let st = self.state.lock();
        let rec = st
            .jobs
            .get(job_id)
            .ok_or_else(|| GatewayError::UnknownJob(job_id.into()))?;
        Ok(f(&st, &rec.job))
    }

    pub fn job(&self, job_id: &str) -> Result<QcJob, GatewayError> {
        self.with_job(job_id, |_, j| j.clone())
    }

    pub fn job_status(&self, job_id: &str) -> Result<JobDocument, GatewayError> {
        self.with_job(job_id, |st, j| JobDocument {
            job_id: j.job_id.clone(),
            state: j.state,
            queue_position: st.queue_position(j),
            reason: j
                .rejection
                .map(|r| r.name().to_string())
                .or_else(|| j.failure.clone()),
        })
    }

    pub fn fetch_results(&self, job_id: &str) -> Result<ResultDocument, GatewayError> {
        self.with_job(job_id, |_, j| ResultDocument {
            job_id: j.job_id.clone(),
            state: j.state,
            counts: j.result.clone(),
            usage: j.usage.clone(),
            reason: j
                .rejection
                .map(|r| r.name().to_string())
                .or_else(|| j.failure.clone()),
        })
    }

    pub fn trace(&self) -> Vec<GatewayEvent> {
        self.state.lock().trace.clone()
    }
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("devices", &self.registry.ids())
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(policy: GatewayPolicy, shots: u64) -> (Arc<Accounting>, Gateway, String) {
        let acc = Arc::new(Accounting::new());
        let p = acc.open_project(vec!["alice".into()]).unwrap();
        acc.approve_project(&p, &[(Resource::Shots, shots), (Resource::QpuSeconds, 1_000_000_000)])
            .unwrap();
        acc.register_token("tok", "alice", &p).unwrap();
        let gw = Gateway::new(
            acc.clone(),
            GatewayConfig {
                policy,
                noisy: false,
                ..GatewayConfig::default()
            },
        )
        .unwrap();
        gw.register_device(DeviceSpec::helmi_sim()).unwrap();
        (acc, gw, p)
    }

    fn bell(shots: u64) -> CircuitBatch {
        CircuitBatch::new(vec![QuantumCircuit::bell()], shots).unwrap()
    }

    #[test]
    fn registration_and_info() {
        let (_, gw, _) = setup(GatewayPolicy::unlimited(), 10);
        let info = gw.get_device_info("helmi-sim").unwrap();
        assert_eq!(info.status.status, DeviceState::Offline);
        assert_eq!(info.spec.topology.n_qubits(), 5);
        assert_eq!(info.spec.topology.edges().count(), 4);
        assert!(matches!(
            gw.register_device(DeviceSpec::helmi_sim()),
            Err(GatewayError::Backend(BackendError::DuplicateDevice(_)))
        ));
        gw.register_device(DeviceSpec::qal9000_sim()).unwrap();
        assert_eq!(gw.get_device_info("qal9000-sim").unwrap().spec.topology.n_qubits(), 25);
        gw.calibrate("helmi-sim", 3, 1.0).unwrap();
        let cal = gw.get_device_info("helmi-sim").unwrap().status.calibration;
        assert!((0.995..=0.999).contains(&cal.f1) && (10.0..=20.0).contains(&cal.t2_us));
        assert!(matches!(gw.get_device_info("x"), Err(GatewayError::UnknownDevice(_))));
    }

    #[test]
    fn offline_device_rejects() {
        let (_, gw, p) = setup(GatewayPolicy::unlimited(), 1_000_000);
        let doc = gw.submit_job("helmi-sim", bell(1000), &p, "tok", 0.0).unwrap();
        assert_eq!(doc.state, JobState::Rejected);
        assert_eq!(doc.reason.as_deref(), Some("device_unavailable"));
    }

    #[test]
    fn accepted_job_runs_and_reports_usage() {
        let (acc, gw, p) = setup(GatewayPolicy::unlimited(), 1_000_000);
        gw.signal_status("helmi-sim", DeviceState::Available, 0.0).unwrap();
        let doc = gw.submit_job("helmi-sim", bell(1000), &p, "tok", 1.0).unwrap();
        assert_eq!((doc.state, doc.queue_position), (JobState::Queued, Some(1)));
        let queued = gw.fetch_results(&doc.job_id).unwrap();
        assert_eq!(queued.state, JobState::Queued);
        assert!(queued.counts.is_none());

        let job = gw.process_queue_step("helmi-sim", 2.0).unwrap().unwrap();
        assert_eq!(job.state, JobState::Done);
        let res = gw.fetch_results(&doc.job_id).unwrap();
        let counts = &res.counts.unwrap()[0];
        assert_eq!(counts.values().sum::<u64>(), 1000);
        assert!(counts.keys().all(|k| k == "00" || k == "11"));
        let usage = res.usage.unwrap();
        assert_eq!(usage.shots, 1000);
        assert!(usage.qpu_seconds > 0.0 && usage.finished_at > usage.started_at);
        assert_eq!(acc.allocation(&p, Resource::Shots).unwrap().used, 1000);
        assert!(acc.check_invariants().is_empty());
        assert!(gw.process_queue_step("helmi-sim", 100.0).unwrap().is_none());
    }

    #[test]
    fn fifo_order_and_calibration_pause() {
        let (_, gw, p) = setup(GatewayPolicy::unlimited(), 1_000_000);
        gw.signal_status("helmi-sim", DeviceState::Available, 0.0).unwrap();
        let ids: Vec<String> = (0..3)
            .map(|i| gw.submit_job("helmi-sim", bell(10), &p, "tok", i as f64).unwrap().job_id)
            .collect();
        gw.signal_status("helmi-sim", DeviceState::Calibrating, 3.0).unwrap();
        assert!(gw.process_queue_step("helmi-sim", 4.0).unwrap().is_none());
        assert_eq!(gw.job_status(&ids[0]).unwrap().queue_position, Some(1));
        gw.signal_status("helmi-sim", DeviceState::Available, 5.0).unwrap();
        let done: Vec<String> = gw.run_until_idle("helmi-sim", 5.0).unwrap().into_iter().map(|j| j.job_id).collect();
        assert_eq!(done, ids);
    }

    #[test]
    fn daily_user_limit() {
        let policy = GatewayPolicy {
            max_jobs_per_user_per_day: 100,
            ..GatewayPolicy::unlimited()
        };
        let (_, gw, p) = setup(policy, 1_000_000);
        gw.signal_status("helmi-sim", DeviceState::Available, 0.0).unwrap();
        for _ in 0..100 {
            assert_eq!(gw.submit_job("helmi-sim", bell(1), &p, "tok", 10.0).unwrap().state, JobState::Queued);
        }
        let doc = gw.submit_job("helmi-sim", bell(1), &p, "tok", 10.0).unwrap();
        assert_eq!(doc.reason.as_deref(), Some("user_limit"));
        // the next day starts a fresh count
        let doc = gw.submit_job("helmi-sim", bell(1), &p, "tok", SECONDS_PER_DAY + 10.0).unwrap();
        assert_eq!(doc.state, JobState::Queued);
    }

    #[test]
    fn window_walltime_quota_and_invalid() {
        let policy = GatewayPolicy {
            window: DailyWindow { start_s: 3600.0, end_s: 7200.0 },
            max_job_walltime_s: 0.05,
            ..GatewayPolicy::unlimited()
        };
        let (acc, gw, p) = setup(policy, 5000);
        gw.signal_status("helmi-sim", DeviceState::Available, 0.0).unwrap();
        let r = |doc: JobDocument| doc.reason.unwrap_or_default();
        assert_eq!(r(gw.submit_job("helmi-sim", bell(10), &p, "tok", 10.0).unwrap()), "outside_window");
        assert_eq!(r(gw.submit_job("helmi-sim", bell(100_000), &p, "tok", 4000.0).unwrap()), "walltime");
        assert_eq!(r(gw.submit_job("helmi-sim", bell(6000), &p, "tok", 4000.0).unwrap()), "quota_exceeded");
        let big = CircuitBatch::new(vec![QuantumCircuit::ghz(6)], 10).unwrap();
        assert_eq!(r(gw.submit_job("helmi-sim", big, &p, "tok", 4000.0).unwrap()), "invalid_circuit");
        assert_eq!(acc.allocation(&p, Resource::Shots).unwrap().reserved, 0);
        assert!(matches!(
            gw.submit_job("nope", bell(1), &p, "tok", 4000.0),
            Err(GatewayError::UnknownDevice(_))
        ));
        assert!(matches!(
            gw.submit_job("helmi-sim", bell(1), "proj-9999", "tok", 4000.0),
            Err(GatewayError::UnknownProject(_))
        ));
        assert!(matches!(
            gw.submit_job("helmi-sim", bell(1), &p, "bad-token", 4000.0),
            Err(GatewayError::Unauthorized(_))
        ));
    }

    #[test]
    fn signals_are_broadcast_once() {
        let (_, gw, _) = setup(GatewayPolicy::unlimited(), 10);
        let rx = gw.subscribe();
        assert!(gw.signal_status("helmi-sim", DeviceState::Available, 1.0).unwrap().changed);
        assert!(!gw.signal_status("helmi-sim", DeviceState::Available, 2.0).unwrap().changed);
        gw.signal_status("helmi-sim", DeviceState::Maintenance, 3.0).unwrap();
        let events: Vec<AvailabilityEvent> = rx.try_iter().collect();
        assert_eq!(events.len(), 2);
        assert!(events[0].open && !events[1].open);
        assert_eq!(gw.events_since(1).len(), 1);
        assert!(matches!(
            gw.signal_status("nope", DeviceState::Available, 0.0),
            Err(GatewayError::UnknownDevice(_))
        ));
    }

    #[test]
    fn counts_are_reported_in_logical_order() {
        let (_, gw, p) = setup(GatewayPolicy::unlimited(), 1_000_000);
        gw.signal_status("helmi-sim", DeviceState::Available, 0.0).unwrap();
        // cz(1,2) on the star forces a swap that moves logical 1 onto physical 0
        let mut c = QuantumCircuit::new("perm", 3);
        c.x(1).cz(1, 2).measure_all();
        let id = gw
            .submit_job("helmi-sim", CircuitBatch::new(vec![c], 50).unwrap(), &p, "tok", 0.0)
            .unwrap()
            .job_id;
        gw.run_until_idle("helmi-sim", 0.0).unwrap();
        let counts = gw.fetch_results(&id).unwrap().counts.unwrap();
        assert_eq!(counts[0], CountsMap::from([("010".to_string(), 50)]));
    }

    #[test]
    fn retention_drops_old_terminal_jobs() {
        let acc = Arc::new(Accounting::new());
        let p = acc.open_project(vec!["a".into()]).unwrap();
        acc.approve_project(&p, &[(Resource::Shots, 100)]).unwrap();
        acc.register_token("t", "a", &p).unwrap();
        let gw = Gateway::new(acc, GatewayConfig { retention: 2, ..GatewayConfig::default() }).unwrap();
        gw.register_device(DeviceSpec::helmi_sim()).unwrap();
        let ids: Vec<String> = (0..3)
            .map(|_| gw.submit_job("helmi-sim", bell(1), &p, "t", 0.0).unwrap().job_id)
            .collect();
        assert!(matches!(gw.job_status(&ids[0]), Err(GatewayError::UnknownJob(_))));
        assert!(gw.job_status(&ids[2]).is_ok());
    }
}
