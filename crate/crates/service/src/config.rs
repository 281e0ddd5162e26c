use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use qhpc_core::accounting::{Accounting, AccountingError, Resource};
use qhpc_core::gateway::{DailyWindow, DeviceState, GatewayConfig, GatewayPolicy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("environment variable {name}: {message}")]
    Env { name: String, message: String },
    #[error(transparent)]
    Accounting(#[from] AccountingError),
}

/// Limits left out stay unlimited.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub window: Option<DailyWindow>,
    pub max_jobs_per_user_per_day: Option<u64>,
    pub max_job_walltime_s: Option<f64>,
    pub max_shots_per_job: Option<u64>,
}

impl PolicyConfig {
    pub fn to_policy(&self) -> GatewayPolicy {
        let base = GatewayPolicy::unlimited();
        GatewayPolicy {
            window: self.window.unwrap_or(base.window),
            max_jobs_per_user_per_day: self.max_jobs_per_user_per_day.unwrap_or(base.max_jobs_per_user_per_day),
            max_job_walltime_s: self.max_job_walltime_s.unwrap_or(base.max_job_walltime_s),
            max_shots_per_job: self.max_shots_per_job.unwrap_or(base.max_shots_per_job),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub project_id: String,
    pub members: Vec<String>,
    /// Grants in reported units (shots, seconds); absent means left pending.
    #[serde(default)]
    pub grants: BTreeMap<Resource, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenConfig {
    pub token: String,
    pub user: String,
    pub project_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub seed: u64,
    pub noisy: bool,
    pub retention: usize,
    pub policy: PolicyConfig,
    /// Device presets registered at startup.
    pub devices: Vec<String>,
    /// Status signalled for every preset at startup.
    pub initial_status: DeviceState,
    pub projects: Vec<ProjectConfig>,
    pub tokens: Vec<TokenConfig>,
    pub ledger: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            seed: 0,
            noisy: true,
            retention: 100_000,
            policy: PolicyConfig::default(),
            devices: vec!["helmi-sim".into()],
            initial_status: DeviceState::Available,
            projects: Vec::new(),
            tokens: Vec::new(),
            ledger: None,
            snapshot: None,
        }
    }
}

fn env_value<T: std::str::FromStr>(get: &impl Fn(&str) -> Option<String>, name: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    match get(name) {
        None => Ok(None),
        Some(raw) => raw.trim().parse().map(Some).map_err(|e: T::Err| ConfigError::Env {
            name: name.into(),
            message: e.to_string(),
        }),
    }
}

impl ServiceConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies `QHPC_*` overrides from the process environment.
    pub fn with_env(self) -> Result<Self, ConfigError> {
        self.with_overrides(|k| std::env::var(k).ok())
    }

    pub fn with_overrides(mut self, get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        if let Some(v) = get("QHPC_HOST") {
            self.host = v;
        }
        if let Some(v) = env_value(&get, "QHPC_PORT")? {
            self.port = v;
        }
        if let Some(v) = env_value(&get, "QHPC_SEED")? {
            self.seed = v;
        }
        if let Some(v) = env_value(&get, "QHPC_NOISY")? {
            self.noisy = v;
        }
        if let Some(v) = env_value(&get, "QHPC_MAX_JOBS_PER_USER_PER_DAY")? {
            self.policy.max_jobs_per_user_per_day = Some(v);
        }
        if let Some(v) = env_value(&get, "QHPC_MAX_JOB_WALLTIME_S")? {
            self.policy.max_job_walltime_s = Some(v);
        }
        if let Some(v) = env_value(&get, "QHPC_MAX_SHOTS_PER_JOB")? {
            self.policy.max_shots_per_job = Some(v);
        }
        if let Some(raw) = get("QHPC_WINDOW") {
            self.policy.window = Some(parse_window(&raw).map_err(|message| ConfigError::Env {
                name: "QHPC_WINDOW".into(),
                message,
            })?);
        }
        if let Some(v) = get("QHPC_LEDGER") {
            self.ledger = Some(v.into());
        }
        Ok(self)
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            policy: self.policy.to_policy(),
            seed: self.seed,
            noisy: self.noisy,
            retention: self.retention,
        }
    }

    /// Opens the ledger (or an in-memory service) and applies configured
    /// projects and tokens. Projects already in a restored ledger are kept.
    pub fn build_accounting(&self) -> Result<Accounting, ConfigError> {
        let acc = match &self.ledger {
            Some(path) => Accounting::open(path, self.snapshot.as_deref())?,
            None => Accounting::new(),
        };
        for p in &self.projects {
            match acc.open_project_named(&p.project_id, p.members.clone()) {
                Ok(_) => {}
                Err(AccountingError::DuplicateProject(_)) => continue,
                Err(e) => return Err(e.into()),
            }
            if !p.grants.is_empty() {
                let grants = p
                    .grants
                    .iter()
                    .map(|(&r, &v)| to_units(r, v).map(|u| (r, u)))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(ConfigError::Parse)?;
                acc.approve_project(&p.project_id, &grants)?;
            }
        }
        for t in &self.tokens {
            acc.register_token(&t.token, &t.user, &t.project_id)?;
        }
        Ok(acc)
    }
}

/// `"start-end"` in seconds after midnight, e.g. `28800-72000`.
pub fn parse_window(raw: &str) -> Result<DailyWindow, String> {
    let (a, b) = raw.split_once('-').ok_or("expected START-END in seconds")?;
    let w = DailyWindow {
        start_s: a.trim().parse().map_err(|_| format!("bad start `{a}`"))?,
        end_s: b.trim().parse().map_err(|_| format!("bad end `{b}`"))?,
    };
    w.validate()?;
    Ok(w)
}

/// Reported units (shots, seconds) to ledger base units.
pub fn to_units(resource: Resource, amount: f64) -> Result<u64, String> {
    if !(amount.is_finite() && amount > 0.0) {
        return Err(format!("{resource} amount must be positive"));
    }
    match resource {
        Resource::Shots if amount.fract() != 0.0 => Err("shots must be a whole number".into()),
        Resource::Shots => Ok(amount as u64),
        _ => Ok(Resource::units_from_seconds(amount)),
    }
}
