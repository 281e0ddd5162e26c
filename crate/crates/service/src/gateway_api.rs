use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use qhpc_core::backend::{CalibrationSnapshot, DeviceSpec};
use qhpc_core::circuit::parse_batch;
use qhpc_core::gateway::{AvailabilityEvent, DeviceInfo, DeviceState, JobDocument, JobState, ResultDocument, SignalAck};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::{utc_now, ApiError, ApiResult, GatewayService};

type Svc = State<Arc<GatewayService>>;

pub fn router(svc: Arc<GatewayService>) -> Router {
    Router::new()
        .route("/devices", post(register_device).get(list_devices))
        .route("/devices/{id}", get(device_info))
        .route("/devices/{id}/status", post(signal_status))
        .route("/devices/{id}/jobs", post(submit_job))
        .route("/devices/{id}/calibration", get(calibration))
        .route("/devices/{id}/events", get(device_events))
        .route("/events", get(events))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/results", get(job_results))
        .with_state(svc)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RegisterBody {
    Preset { preset: String },
    Spec(DeviceSpec),
}

async fn register_device(State(svc): Svc, Json(body): Json<RegisterBody>) -> ApiResult<(StatusCode, Json<Value>)> {
    let spec = match body {
        RegisterBody::Preset { preset } => DeviceSpec::preset(&preset)
            .ok_or_else(|| ApiError::bad_request(format!("unknown device preset `{preset}`")))?,
        RegisterBody::Spec(spec) => spec,
    };
    let id = svc.register(spec)?;
    Ok((StatusCode::CREATED, Json(json!({ "device_id": id }))))
}

async fn list_devices(State(svc): Svc) -> ApiResult<Json<Vec<DeviceInfo>>> {
    let infos = svc
        .gateway
        .device_ids()
        .iter()
        .map(|id| svc.gateway.get_device_info(id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Json(infos))
}

async fn device_info(State(svc): Svc, Path(id): Path<String>) -> ApiResult<Json<DeviceInfo>> {
    Ok(Json(svc.gateway.get_device_info(&id)?))
}

async fn calibration(State(svc): Svc, Path(id): Path<String>) -> ApiResult<Json<CalibrationSnapshot>> {
    Ok(Json(svc.gateway.calibration(&id)?))
}

#[derive(Deserialize)]
struct StatusBody {
    status: DeviceState,
}

async fn signal_status(State(svc): Svc, Path(id): Path<String>, Json(body): Json<StatusBody>) -> ApiResult<Json<SignalAck>> {
    Ok(Json(svc.gateway.signal_status(&id, body.status, utc_now())?))
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    after: u64,
}

async fn events(State(svc): Svc, Query(q): Query<EventsQuery>) -> Json<Vec<AvailabilityEvent>> {
    Json(svc.gateway.events_since(q.after))
}

async fn device_events(
    State(svc): Svc,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Json<Vec<AvailabilityEvent>>> {
    svc.gateway.get_device_info(&id)?;
    let mut ev = svc.gateway.events_since(q.after);
    ev.retain(|e| e.device_id == id);
    Ok(Json(ev))
}

fn bearer(headers: &HeaderMap) -> ApiResult<String> {
    headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|t| t.trim().to_string())
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token"))
}

/// Body: a batch document plus an optional `project_id`, which defaults to
/// the project bound to the token.
async fn submit_job(
    State(svc): Svc,
    Path(device): Path<String>,
    headers: HeaderMap,
    Json(mut body): Json<Value>,
) -> ApiResult<(StatusCode, Json<JobDocument>)> {
    let token = bearer(&headers)?;
    let project = match body.as_object_mut().and_then(|o| o.remove("project_id")) {
        Some(Value::String(p)) => p,
        Some(_) => return Err(ApiError::bad_request("project_id must be a string")),
        None => svc.gateway.accounting().authenticate(&token)?.project_id,
    };
    let batch = parse_batch(&body.to_string()).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let doc = svc.gateway.submit_job(&device, batch, &project, &token, utc_now())?;
    let status = if doc.state == JobState::Rejected {
        StatusCode::UNPROCESSABLE_ENTITY
    } else {
        StatusCode::CREATED
    };
    Ok((status, Json(doc)))
}

async fn job_status(State(svc): Svc, Path(id): Path<String>) -> ApiResult<Json<JobDocument>> {
    Ok(Json(svc.gateway.job_status(&id)?))
}

async fn job_results(State(svc): Svc, Path(id): Path<String>) -> ApiResult<Json<ResultDocument>> {
    Ok(Json(svc.gateway.fetch_results(&id)?))
}
