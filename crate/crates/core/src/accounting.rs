//! Projects, quota allocations, reservations and the append-only usage ledger.
//!
//! Every mutating call is applied under one lock, written to the in-memory
//! ledger and, when a ledger file is attached, appended to it as one JSON
//! object per line. Replaying the ledger (optionally on top of a snapshot)
//! reconstructs the exact state.
//!
//! Amounts are integers in base units: shots count individually, the two
//! time resources count microseconds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountingError {
    #[error("unknown project `{0}`")]
    UnknownProject(String),
    #[error("project `{0}` already exists")]
    DuplicateProject(String),
    #[error("project `{0}` is not pending approval")]
    NotPending(String),
    #[error("project `{0}` is not approved")]
    NotApproved(String),
    #[error("quota exceeded for {project}/{resource}: requested {requested}, headroom {headroom}")]
    QuotaExceeded {
        project: String,
        resource: Resource,
        requested: u64,
        headroom: u64,
    },
    #[error("unknown reservation `{0}`")]
    UnknownReservation(String),
    #[error("reservation `{0}` is already closed")]
    ReservationClosed(String),
    #[error("actual amount {actual} exceeds reserved {reserved}")]
    ExceedsReservation { actual: u64, reserved: u64 },
    #[error("amount must be positive")]
    NonPositiveAmount,
    #[error("grants must be positive and non-empty")]
    InvalidGrant,
    #[error("unknown credentials")]
    UnknownToken,
    #[error("user `{user}` is not a member of `{project}`")]
    NotAMember { user: String, project: String },
    #[error("ledger i/o: {0}")]
    Io(String),
    #[error("corrupt ledger: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for AccountingError {
    fn from(e: std::io::Error) -> Self {
        AccountingError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    CpuCoreSeconds,
    QpuSeconds,
    Shots,
}

impl Resource {
    pub const ALL: [Resource; 3] = [Resource::CpuCoreSeconds, Resource::QpuSeconds, Resource::Shots];

    pub fn name(self) -> &'static str {
        match self {
            Resource::CpuCoreSeconds => "cpu_core_seconds",
            Resource::QpuSeconds => "qpu_seconds",
            Resource::Shots => "shots",
        }
    }

    /// Base units per reported unit.
    pub fn scale(self) -> u64 {
        match self {
            Resource::Shots => 1,
            Resource::CpuCoreSeconds | Resource::QpuSeconds => 1_000_000,
        }
    }

    /// Converts seconds into base units, rounding up.
    pub fn units_from_seconds(seconds: f64) -> u64 {
        (seconds * 1e6).ceil().max(0.0) as u64
    }

    pub fn to_display_units(self, amount: u64) -> f64 {
        amount as f64 / self.scale() as f64
    }
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Resource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Resource::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown resource `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectState {
    Pending,
    Approved,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub project_id: String,
    pub members: BTreeSet<String>,
    pub state: ProjectState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub granted: u64,
    pub used: u64,
    pub reserved: u64,
}

impl Allocation {
    pub fn headroom(&self) -> u64 {
        self.granted.saturating_sub(self.used + self.reserved)
    }

    /// used/granted, the consumed fraction of the grant.
    pub fn usage_ratio(&self) -> f64 {
        if self.granted == 0 {
            0.0
        } else {
            self.used as f64 / self.granted as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub record_id: u64,
    pub project_id: String,
    pub job_id: String,
    pub resource: Resource,
    pub amount: u64,
    pub started_at: f64,
    pub finished_at: f64,
}

/// Job metadata attached to a commit.
#[derive(Debug, Clone, PartialEq)]
pub struct JobMeta {
    pub job_id: String,
    pub started_at: f64,
    pub finished_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservationState {
    Live,
    Committed,
    Released,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservation {
    pub reservation_id: String,
    pub project_id: String,
    pub resource: Resource,
    pub amount: u64,
    pub state: ReservationState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub user: String,
    pub project_id: String,
}

/// One ledger line. Field order is fixed by declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerEntry {
    ProjectOpened {
        seq: u64,
        project_id: String,
        members: Vec<String>,
    },
    ProjectApproved {
        seq: u64,
        project_id: String,
        grants: Vec<(Resource, u64)>,
    },
    ProjectClosed {
        seq: u64,
        project_id: String,
    },
    Reserved {
        seq: u64,
        reservation_id: String,
        project_id: String,
        resource: Resource,
        amount: u64,
    },
    Committed {
        seq: u64,
        reservation_id: String,
        record: UsageRecord,
    },
    Released {
        seq: u64,
        reservation_id: String,
    },
}

impl LedgerEntry {
    pub fn seq(&self) -> u64 {
        match self {
            LedgerEntry::ProjectOpened { seq, .. }
            | LedgerEntry::ProjectApproved { seq, .. }
            | LedgerEntry::ProjectClosed { seq, .. }
            | LedgerEntry::Reserved { seq, .. }
            | LedgerEntry::Committed { seq, .. }
            | LedgerEntry::Released { seq, .. } => *seq,
        }
    }
}

/// Half-open `[from, to)` window over `finished_at`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Period {
    pub from: f64,
    pub to: f64,
}

impl Period {
    pub fn all() -> Self {
        Self {
            from: f64::NEG_INFINITY,
            to: f64::INFINITY,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.from && t < self.to
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UsageReport {
    pub project_id: Option<String>,
    pub totals: BTreeMap<Resource, u64>,
    pub records: usize,
    pub jobs: usize,
    /// Distinct jobs that consumed each resource.
    pub jobs_by_resource: BTreeMap<Resource, usize>,
}

impl UsageReport {
    pub fn total(&self, r: Resource) -> u64 {
        self.totals.get(&r).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct State {
    last_seq: u64,
    next_project: u64,
    next_reservation: u64,
    next_record: u64,
    projects: BTreeMap<String, Project>,
    allocations: BTreeMap<String, BTreeMap<Resource, Allocation>>,
    reservations: BTreeMap<String, Reservation>,
    records: Vec<UsageRecord>,
}

impl State {
    fn project(&self, id: &str) -> Result<&Project, AccountingError> {
        self.projects
            .get(id)
            .ok_or_else(|| AccountingError::UnknownProject(id.into()))
    }

    fn allocation_mut(&mut self, project: &str, r: Resource) -> &mut Allocation {
        self.allocations
            .entry(project.into())
            .or_default()
            .entry(r)
            .or_default()
    }

    // Applies a validated entry; used both live and on replay.
    fn apply(&mut self, e: &LedgerEntry) {
        self.last_seq = e.seq();
        match e {
            LedgerEntry::ProjectOpened { project_id, members, .. } => {
                self.next_project += 1;
                self.projects.insert(
                    project_id.clone(),
                    Project {
                        project_id: project_id.clone(),
                        members: members.iter().cloned().collect(),
                        state: ProjectState::Pending,
                    },
                );
            }
            LedgerEntry::ProjectApproved { project_id, grants, .. } => {
                if let Some(p) = self.projects.get_mut(project_id) {
                    p.state = ProjectState::Approved;
                }
                for &(r, amount) in grants {
                    self.allocation_mut(project_id, r).granted = amount;
                }
            }
            LedgerEntry::ProjectClosed { project_id, .. } => {
                if let Some(p) = self.projects.get_mut(project_id) {
                    p.state = ProjectState::Closed;
                }
            }
            LedgerEntry::Reserved {
                reservation_id,
                project_id,
                resource,
                amount,
                ..
            } => {
                self.next_reservation += 1;
                self.allocation_mut(project_id, *resource).reserved += amount;
                self.reservations.insert(
                    reservation_id.clone(),
                    Reservation {
                        reservation_id: reservation_id.clone(),
                        project_id: project_id.clone(),
                        resource: *resource,
                        amount: *amount,
                        state: ReservationState::Live,
                    },
                );
            }
            LedgerEntry::Committed { reservation_id, record, .. } => {
                let res = self
                    .reservations
                    .get_mut(reservation_id)
                    .expect("validated reservation");
                res.state = ReservationState::Committed;
                let (project, resource, held) = (res.project_id.clone(), res.resource, res.amount);
                let alloc = self.allocation_mut(&project, resource);
                alloc.reserved -= held;
                alloc.used += record.amount;
                self.next_record = self.next_record.max(record.record_id + 1);
                self.records.push(record.clone());
            }
            LedgerEntry::Released { reservation_id, .. } => {
                let res = self
                    .reservations
                    .get_mut(reservation_id)
                    .expect("validated reservation");
                res.state = ReservationState::Released;
                let (project, resource, held) = (res.project_id.clone(), res.resource, res.amount);
                self.allocation_mut(&project, resource).reserved -= held;
            }
        }
    }

    fn live_reservation(&self, id: &str) -> Result<&Reservation, AccountingError> {
        let res = self
            .reservations
            .get(id)
            .ok_or_else(|| AccountingError::UnknownReservation(id.into()))?;
        if res.state != ReservationState::Live {
            return Err(AccountingError::ReservationClosed(id.into()));
        }
        Ok(res)
    }
}

struct Inner {
    state: State,
    ledger: Vec<LedgerEntry>,
    sink: Option<BufWriter<File>>,
}

impl Inner {
    fn append(&mut self, make: impl FnOnce(u64) -> LedgerEntry) -> Result<LedgerEntry, AccountingError> {
        let entry = make(self.state.last_seq + 1);
        if let Some(sink) = self.sink.as_mut() {
            let line = serde_json::to_string(&entry).map_err(|e| AccountingError::Io(e.to_string()))?;
            writeln!(sink, "{line}")?;
            sink.flush()?;
        }
        self.state.apply(&entry);
        self.ledger.push(entry.clone());
        Ok(entry)
    }
}

/// The accounting service. All methods take `&self` and are linearizable.
pub struct Accounting {
    inner: Mutex<Inner>,
    tokens: Mutex<BTreeMap<String, Identity>>,
    ledger_path: Option<PathBuf>,
}

impl Default for Accounting {
    fn default() -> Self {
        Self::new()
    }
}

impl Accounting {
    pub fn new() -> Self {
        Self {
            inner: Mutex::new(Inner {
                state: State::default(),
                ledger: Vec::new(),
                sink: None,
            }),
            tokens: Mutex::new(BTreeMap::new()),
            ledger_path: None,
        }
    }

    /// Opens (or creates) a ledger file, restoring state from an optional
    /// snapshot plus every ledger line after the snapshot's sequence number.
    pub fn open(ledger: &Path, snapshot: Option<&Path>) -> Result<Self, AccountingError> {
        let mut state = match snapshot {
            Some(p) if p.exists() => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str::<State>(&text).map_err(|e| AccountingError::Corrupt(e.to_string()))?
            }
            _ => State::default(),
        };
        let mut entries = Vec::new();
        if ledger.exists() {
            let reader = BufReader::new(File::open(ledger)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LedgerEntry = serde_json::from_str(&line)
                    .map_err(|e| AccountingError::Corrupt(format!("line {}: {e}", n + 1)))?;
                if entry.seq() > state.last_seq {
                    if entry.seq() != state.last_seq + 1 {
                        return Err(AccountingError::Corrupt(format!(
                            "sequence gap at line {}",
                            n + 1
                        )));
                    }
                    state.apply(&entry);
                }
                entries.push(entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(ledger)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                state,
                ledger: entries,
                sink: Some(BufWriter::new(file)),
            }),
            tokens: Mutex::new(BTreeMap::new()),
            ledger_path: Some(ledger.to_path_buf()),
        })
    }

    pub fn ledger_path(&self) -> Option<&Path> {
        self.ledger_path.as_deref()
    }

    /// Writes the full state; later restores replay only newer ledger lines.
    pub fn snapshot(&self, path: &Path) -> Result<(), AccountingError> {
        let inner = self.inner.lock();
        let text = serde_json::to_string(&inner.state).map_err(|e| AccountingError::Io(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Rebuilds an in-memory service from ledger entries alone.
    pub fn replay(entries: &[LedgerEntry]) -> Self {
        let acc = Self::new();
        {
            let mut inner = acc.inner.lock();
            for e in entries {
                inner.state.apply(e);
                inner.ledger.push(e.clone());
            }
        }
        acc
    }

    pub fn open_project(&self, members: Vec<String>) -> Result<String, AccountingError> {
        let mut inner = self.inner.lock();
        let id = format!("proj-{:04}", inner.state.next_project + 1);
        Self::open_locked(&mut inner, id, members)
    }

    /// Opens a project under a caller-chosen id.
    pub fn open_project_named(&self, project_id: &str, members: Vec<String>) -> Result<String, AccountingError> {
        let mut inner = self.inner.lock();
        if inner.state.projects.contains_key(project_id) {
            return Err(AccountingError::DuplicateProject(project_id.into()));
        }
        Self::open_locked(&mut inner, project_id.to_string(), members)
    }

    fn open_locked(inner: &mut Inner, project_id: String, members: Vec<String>) -> Result<String, AccountingError> {
        inner.append(|seq| LedgerEntry::ProjectOpened {
            seq,
            project_id: project_id.clone(),
            members,
        })?;
        Ok(project_id)
    }

    pub fn approve_project(&self, project_id: &str, grants: &[(Resource, u64)]) -> Result<(), AccountingError> {
        if grants.is_empty() || grants.iter().any(|&(_, a)| a == 0) {
            return Err(AccountingError::InvalidGrant);
        }
        let mut inner = self.inner.lock();
        if inner.state.project(project_id)?.state != ProjectState::Pending {
            return Err(AccountingError::NotPending(project_id.into()));
        }
        inner.append(|seq| LedgerEntry::ProjectApproved {
            seq,
            project_id: project_id.into(),
            grants: grants.to_vec(),
        })?;
        Ok(())
    }

    pub fn close_project(&self, project_id: &str) -> Result<(), AccountingError> {
        let mut inner = self.inner.lock();
        inner.state.project(project_id)?;
        inner.append(|seq| LedgerEntry::ProjectClosed {
            seq,
            project_id: project_id.into(),
        })?;
        Ok(())
    }

    pub fn project(&self, project_id: &str) -> Result<Project, AccountingError> {
        self.inner.lock().state.project(project_id).cloned()
    }

    pub fn project_ids(&self) -> Vec<String> {
        self.inner.lock().state.projects.keys().cloned().collect()
    }

    pub fn reserve(&self, project_id: &str, resource: Resource, amount: u64) -> Result<String, AccountingError> {
        if amount == 0 {
            return Err(AccountingError::NonPositiveAmount);
        }
        let mut inner = self.inner.lock();
        if inner.state.project(project_id)?.state != ProjectState::Approved {
            return Err(AccountingError::NotApproved(project_id.into()));
        }
        let alloc = inner
            .state
            .allocations
            .get(project_id)
            .and_then(|m| m.get(&resource))
            .copied()
            .unwrap_or_default();
        if alloc.headroom() < amount {
            return Err(AccountingError::QuotaExceeded {
                project: project_id.into(),
                resource,
                requested: amount,
                headroom: alloc.headroom(),
            });
        }
        let id = format!("res-{:06}", inner.state.next_reservation + 1);
        inner.append(|seq| LedgerEntry::Reserved {
            seq,
            reservation_id: id.clone(),
            project_id: project_id.into(),
            resource,
            amount,
        })?;
        Ok(id)
    }

    pub fn commit_usage(&self, reservation_id: &str, actual: u64, job: &JobMeta) -> Result<UsageRecord, AccountingError> {
        let mut inner = self.inner.lock();
        let res = inner.state.live_reservation(reservation_id)?.clone();
        if actual > res.amount {
            return Err(AccountingError::ExceedsReservation {
                actual,
                reserved: res.amount,
            });
        }
        let record = UsageRecord {
            record_id: inner.state.next_record,
            project_id: res.project_id,
            job_id: job.job_id.clone(),
            resource: res.resource,
            amount: actual,
            started_at: job.started_at,
            finished_at: job.finished_at,
        };
        inner.append(|seq| LedgerEntry::Committed {
            seq,
            reservation_id: reservation_id.into(),
            record: record.clone(),
        })?;
        Ok(record)
    }

    pub fn release(&self, reservation_id: &str) -> Result<(), AccountingError> {
        let mut inner = self.inner.lock();
        inner.state.live_reservation(reservation_id)?;
        inner.append(|seq| LedgerEntry::Released {
            seq,
            reservation_id: reservation_id.into(),
        })?;
        Ok(())
    }

    pub fn reservation(&self, reservation_id: &str) -> Result<Reservation, AccountingError> {
        self.inner
            .lock()
            .state
            .reservations
            .get(reservation_id)
            .cloned()
            .ok_or_else(|| AccountingError::UnknownReservation(reservation_id.into()))
    }

    /// Zeroed allocation when the project holds no grant for `resource`.
    pub fn allocation(&self, project_id: &str, resource: Resource) -> Result<Allocation, AccountingError> {
        let inner = self.inner.lock();
        inner.state.project(project_id)?;
        Ok(inner
            .state
            .allocations
            .get(project_id)
            .and_then(|m| m.get(&resource))
            .copied()
            .unwrap_or_default())
    }

    /// Non-reserving quota check used for submit-time admission.
    pub fn precheck(&self, project_id: &str, resource: Resource, amount: u64) -> Result<(), AccountingError> {
        let inner = self.inner.lock();
        if inner.state.project(project_id)?.state != ProjectState::Approved {
            return Err(AccountingError::NotApproved(project_id.into()));
        }
        let alloc = inner
            .state
            .allocations
            .get(project_id)
            .and_then(|m| m.get(&resource))
            .copied()
            .unwrap_or_default();
        if alloc.headroom() < amount {
            return Err(AccountingError::QuotaExceeded {
                project: project_id.into(),
                resource,
                requested: amount,
                headroom: alloc.headroom(),
            });
        }
        Ok(())
    }

    fn report_where(&self, project: Option<&str>, period: Period) -> UsageReport {
        let inner = self.inner.lock();
        let mut totals: BTreeMap<Resource, u64> = Resource::ALL.iter().map(|&r| (r, 0)).collect();
        let mut records = 0;
        let mut jobs = BTreeSet::new();
        let mut per: BTreeMap<Resource, BTreeSet<&str>> = BTreeMap::new();
        for rec in &inner.state.records {
            if project.is_some_and(|p| p != rec.project_id) || !period.contains(rec.finished_at) {
                continue;
            }
            *totals.get_mut(&rec.resource).expect("all resources present") += rec.amount;
            records += 1;
            jobs.insert(rec.job_id.as_str());
            per.entry(rec.resource).or_default().insert(rec.job_id.as_str());
        }
        UsageReport {
            project_id: project.map(str::to_string),
            totals,
            records,
            jobs: jobs.len(),
            jobs_by_resource: Resource::ALL
                .iter()
                .map(|&r| (r, per.get(&r).map_or(0, BTreeSet::len)))
                .collect(),
        }
    }

    pub fn usage_report(&self, project_id: &str, period: Period) -> Result<UsageReport, AccountingError> {
        self.project(project_id)?;
        Ok(self.report_where(Some(project_id), period))
    }

    /// Aggregate over every project.
    pub fn usage_report_all(&self, period: Period) -> UsageReport {
        self.report_where(None, period)
    }

    pub fn records(&self) -> Vec<UsageRecord> {
        self.inner.lock().state.records.clone()
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.inner.lock().ledger.clone()
    }

    pub fn register_token(&self, token: &str, user: &str, project_id: &str) -> Result<(), AccountingError> {
        let project = self.project(project_id)?;
        if !project.members.contains(user) {
            return Err(AccountingError::NotAMember {
                user: user.into(),
                project: project_id.into(),
            });
        }
        self.tokens.lock().insert(
            token.into(),
            Identity {
                user: user.into(),
                project_id: project_id.into(),
            },
        );
        Ok(())
    }

    pub fn authenticate(&self, token: &str) -> Result<Identity, AccountingError> {
        self.tokens
            .lock()
            .get(token)
            .cloned()
            .ok_or(AccountingError::UnknownToken)
    }

    /// Quota safety, ledger conservation and reservation bookkeeping,
    /// checked against the current state. Empty when everything holds.
    pub fn check_invariants(&self) -> Vec<String> {
        let inner = self.inner.lock();
        let st = &inner.state;
        let mut problems = Vec::new();
        let mut folded: BTreeMap<(&str, Resource), u64> = BTreeMap::new();
        for rec in &st.records {
            *folded.entry((rec.project_id.as_str(), rec.resource)).or_default() += rec.amount;
        }
        let mut held: BTreeMap<(&str, Resource), u64> = BTreeMap::new();
        for res in st.reservations.values().filter(|r| r.state == ReservationState::Live) {
            *held.entry((res.project_id.as_str(), res.resource)).or_default() += res.amount;
        }
        for (project, allocs) in &st.allocations {
            for (&r, a) in allocs {
                if a.used + a.reserved > a.granted {
                    problems.push(format!("{project}/{r}: used {} + reserved {} > granted {}", a.used, a.reserved, a.granted));
                }
                let fold = folded.get(&(project.as_str(), r)).copied().unwrap_or(0);
                if fold != a.used {
                    problems.push(format!("{project}/{r}: used {} != ledger fold {fold}", a.used));
                }
                let live = held.get(&(project.as_str(), r)).copied().unwrap_or(0);
                if live != a.reserved {
                    problems.push(format!("{project}/{r}: reserved {} != live holds {live}", a.reserved));
                }
            }
        }
        problems
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approved(acc: &Accounting, shots: u64) -> String {
        let p = acc.open_project(vec!["alice".into()]).unwrap();
        acc.approve_project(&p, &[(Resource::Shots, shots)]).unwrap();
        p
    }

    fn meta(job: &str) -> JobMeta {
        JobMeta {
            job_id: job.into(),
            started_at: 1.0,
            finished_at: 2.0,
        }
    }

    #[test]
    fn approval_lifecycle() {
        let acc = Accounting::new();
        let p = acc.open_project(vec!["alice".into()]).unwrap();
        assert_eq!(acc.reserve(&p, Resource::Shots, 1), Err(AccountingError::NotApproved(p.clone())));
        acc.approve_project(&p, &[(Resource::Shots, 1_000_000)]).unwrap();
        assert_eq!(acc.allocation(&p, Resource::Shots).unwrap().granted, 1_000_000);
        assert_eq!(
            acc.approve_project(&p, &[(Resource::Shots, 1)]),
            Err(AccountingError::NotPending(p.clone()))
        );
        assert_eq!(acc.approve_project("nope", &[(Resource::Shots, 1)]), Err(AccountingError::UnknownProject("nope".into())));
        let q = acc.open_project(vec![]).unwrap();
        assert_eq!(acc.approve_project(&q, &[(Resource::Shots, 0)]), Err(AccountingError::InvalidGrant));
    }

    #[test]
    fn reservation_boundaries() {
        let acc = Accounting::new();
        let p = approved(&acc, 1_000_000);
        assert!(matches!(acc.reserve(&p, Resource::Shots, 2_000_000), Err(AccountingError::QuotaExceeded { .. })));
        acc.reserve(&p, Resource::Shots, 1_000_000).unwrap();
        assert!(matches!(acc.reserve(&p, Resource::Shots, 1), Err(AccountingError::QuotaExceeded { .. })));
        assert_eq!(acc.reserve(&p, Resource::Shots, 0), Err(AccountingError::NonPositiveAmount));
        // no grant for this resource at all
        assert!(matches!(acc.reserve(&p, Resource::QpuSeconds, 1), Err(AccountingError::QuotaExceeded { .. })));
    }

    #[test]
    fn commit_and_release() {
        let acc = Accounting::new();
        let p = approved(&acc, 10_000);
        let r = acc.reserve(&p, Resource::Shots, 1000).unwrap();
        acc.commit_usage(&r, 1000, &meta("j1")).unwrap();
        let a = acc.allocation(&p, Resource::Shots).unwrap();
        assert_eq!((a.used, a.reserved), (1000, 0));

        let r = acc.reserve(&p, Resource::Shots, 1000).unwrap();
        acc.commit_usage(&r, 800, &meta("j2")).unwrap();
        let a = acc.allocation(&p, Resource::Shots).unwrap();
        assert_eq!((a.used, a.reserved, a.headroom()), (1800, 0, 8200));
        assert_eq!(acc.commit_usage(&r, 1, &meta("j2")), Err(AccountingError::ReservationClosed(r.clone())));

        let r = acc.reserve(&p, Resource::Shots, 5000).unwrap();
        assert_eq!(
            acc.commit_usage(&r, 5001, &meta("j3")),
            Err(AccountingError::ExceedsReservation { actual: 5001, reserved: 5000 })
        );
        acc.release(&r).unwrap();
        assert_eq!(acc.allocation(&p, Resource::Shots).unwrap().headroom(), 8200);
        assert_eq!(acc.records().len(), 2);
        assert_eq!(acc.release(&r), Err(AccountingError::ReservationClosed(r)));
        assert!(acc.check_invariants().is_empty());
    }

    #[test]
    fn reports_fold_the_ledger() {
        let acc = Accounting::new();
        let p = approved(&acc, 10_000);
        let empty = acc.usage_report(&p, Period::all()).unwrap();
        assert!(empty.totals.values().all(|&v| v == 0));
        for (i, amount) in [300u64, 200, 500].into_iter().enumerate() {
            let r = acc.reserve(&p, Resource::Shots, amount).unwrap();
            let m = JobMeta { job_id: format!("j{i}"), started_at: i as f64, finished_at: i as f64 + 0.5 };
            acc.commit_usage(&r, amount, &m).unwrap();
        }
        let all = acc.usage_report(&p, Period::all()).unwrap();
        assert_eq!(all.total(Resource::Shots), 1000);
        assert_eq!(all.jobs, 3);
        assert_eq!(all, acc.usage_report(&p, Period::all()).unwrap());
        let window = acc.usage_report(&p, Period { from: 1.0, to: 2.0 }).unwrap();
        assert_eq!(window.total(Resource::Shots), 200);
        assert_eq!(acc.usage_report(&p, Period { from: 10.0, to: 20.0 }).unwrap().records, 0);
    }

    #[test]
    fn tokens_map_to_members() {
        let acc = Accounting::new();
        let p = approved(&acc, 10);
        acc.register_token("t-alice", "alice", &p).unwrap();
        assert!(matches!(acc.register_token("t-bob", "bob", &p), Err(AccountingError::NotAMember { .. })));
        assert_eq!(acc.authenticate("t-alice").unwrap().user, "alice");
        assert_eq!(acc.authenticate("zzz"), Err(AccountingError::UnknownToken));
    }

    #[test]
    fn ledger_file_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = dir.path().join("ledger.jsonl");
        let snap = dir.path().join("snapshot.json");
        let p;
        {
            let acc = Accounting::open(&ledger, Some(&snap)).unwrap();
            p = approved(&acc, 5000);
            let r = acc.reserve(&p, Resource::Shots, 1000).unwrap();
            acc.commit_usage(&r, 900, &meta("a")).unwrap();
            acc.snapshot(&snap).unwrap();
            let r = acc.reserve(&p, Resource::Shots, 100).unwrap();
            acc.commit_usage(&r, 100, &meta("b")).unwrap();
            acc.reserve(&p, Resource::Shots, 50).unwrap();
        }
        let text = std::fs::read_to_string(&ledger).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().next().unwrap().starts_with(r#"{"kind":"project_opened","seq":1"#));

        for snapshot in [None, Some(snap.as_path())] {
            let acc = Accounting::open(&ledger, snapshot).unwrap();
            let a = acc.allocation(&p, Resource::Shots).unwrap();
            assert_eq!((a.granted, a.used, a.reserved), (5000, 1000, 50));
            assert!(acc.check_invariants().is_empty());
            assert_eq!(acc.usage_report(&p, Period::all()).unwrap().records, 2);
        }
    }

    #[test]
    fn in_memory_replay_matches() {
        let acc = Accounting::new();
        let p = approved(&acc, 5000);
        let r = acc.reserve(&p, Resource::Shots, 10).unwrap();
        acc.release(&r).unwrap();
        let r = acc.reserve(&p, Resource::Shots, 20).unwrap();
        acc.commit_usage(&r, 20, &meta("x")).unwrap();
        let copy = Accounting::replay(&acc.ledger());
        assert_eq!(copy.allocation(&p, Resource::Shots), acc.allocation(&p, Resource::Shots));
        assert_eq!(copy.records(), acc.records());
        // ids keep counting after replay
        assert_ne!(copy.reserve(&p, Resource::Shots, 1).unwrap(), r);
    }

    #[test]
    fn units() {
        assert_eq!(Resource::units_from_seconds(1.5), 1_500_000);
        assert_eq!(Resource::units_from_seconds(1e-7), 1);
        assert_eq!("qpu_seconds".parse::<Resource>(), Ok(Resource::QpuSeconds));
    }
}
