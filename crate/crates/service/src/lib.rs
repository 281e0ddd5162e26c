//! HTTP front ends for the gateway and accounting services.

pub mod accounting_api;
pub mod config;
pub mod gateway_api;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use std::sync::Mutex;
use qhpc_core::accounting::{Accounting, AccountingError};
use qhpc_core::backend::{BackendError, DeviceSpec};
use qhpc_core::gateway::{Gateway, GatewayError};
use serde_json::json;
use tokio::net::TcpListener;

pub use axum::Router;
pub use config::{ConfigError, ServiceConfig};


/// Wall clock in UTC seconds.
pub fn utc_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<AccountingError> for ApiError {
    fn from(e: AccountingError) -> Self {
        use AccountingError::*;
        let status = match &e {
            UnknownProject(_) | UnknownReservation(_) => StatusCode::NOT_FOUND,
            DuplicateProject(_) | NotPending(_) | NotApproved(_) | ReservationClosed(_) | QuotaExceeded { .. } => {
                StatusCode::CONFLICT
            }
            ExceedsReservation { .. } | NonPositiveAmount | InvalidGrant => StatusCode::BAD_REQUEST,
            UnknownToken => StatusCode::UNAUTHORIZED,
            NotAMember { .. } => StatusCode::FORBIDDEN,
            Io(_) | Corrupt(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let status = match &e {
            GatewayError::UnknownDevice(_) | GatewayError::UnknownProject(_) | GatewayError::UnknownJob(_) => {
                StatusCode::NOT_FOUND
            }
            GatewayError::Unauthorized(_) => StatusCode::FORBIDDEN,
            GatewayError::Backend(BackendError::DuplicateDevice(_)) => StatusCode::CONFLICT,
            GatewayError::Accounting(a) => return ApiError::from(a.clone()),
            GatewayError::InvalidPolicy(_) | GatewayError::Backend(_) | GatewayError::Transpile(_) => {
                StatusCode::BAD_REQUEST
            }
        };
        Self::new(status, e.to_string())
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

/// One executor thread per registered device, stopped on drop.
#[derive(Default)]
pub struct Executors {
    stop: Arc<AtomicBool>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Executors {
    pub fn spawn(&self, gateway: Arc<Gateway>, device_id: String) {
        let stop = self.stop.clone();
        let handle = std::thread::spawn(move || {
            // the device was registered just before, so this cannot fail
            let _ = gateway.run_executor(&device_id, utc_now, &stop);
        });
        self.threads.lock().expect("executor list").push(handle);
    }
}

impl Drop for Executors {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.threads.lock().expect("executor list").drain(..) {
            let _ = h.join();
        }
    }
}

/// Gateway state shared by the handlers.
pub struct GatewayService {
    pub gateway: Arc<Gateway>,
    pub executors: Executors,
}

impl GatewayService {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self {
            gateway,
            executors: Executors::default(),
        }
    }

    pub fn register(&self, spec: DeviceSpec) -> Result<String, GatewayError> {
        let id = self.gateway.register_device(spec)?;
        self.executors.spawn(self.gateway.clone(), id.clone());
        Ok(id)
    }

    /// Builds the gateway (with its in-process accounting) from a config,
    /// registering and signalling the configured device presets.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Arc<Self>, ConfigError> {
        let accounting = Arc::new(cfg.build_accounting()?);
        let gateway =
            Gateway::new(accounting, cfg.gateway_config()).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let svc = Arc::new(Self::new(Arc::new(gateway)));
        for (i, name) in cfg.devices.iter().enumerate() {
            let spec = DeviceSpec::preset(name).ok_or_else(|| ConfigError::Parse(format!("unknown device preset `{name}`")))?;
            let id = svc.register(spec).map_err(|e| ConfigError::Parse(e.to_string()))?;
            let now = utc_now();
            svc.gateway
                .calibrate(&id, qhpc_core::backend::derive_seed(cfg.seed, i as u64), now)
                .map_err(|e| ConfigError::Parse(e.to_string()))?;
            svc.gateway
                .signal_status(&id, cfg.initial_status, now)
                .map_err(|e| ConfigError::Parse(e.to_string()))?;
        }
        Ok(svc)
    }
}

/// Gateway endpoints plus the accounting endpoints over the same ledger.
pub fn gateway_app(svc: Arc<GatewayService>) -> Router {
    let accounting = svc.gateway.accounting().clone();
    gateway_api::router(svc).merge(accounting_api::router(accounting))
}

pub fn accounting_app(accounting: Arc<Accounting>) -> Router {
    accounting_api::router(accounting)
}

pub async fn bind(host: &str, port: u16) -> std::io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind((host, port)).await?;
    let addr = listener.local_addr()?;
    Ok((listener, addr))
}

/// Serves until ctrl-c.
pub async fn serve(listener: TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
