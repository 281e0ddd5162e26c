use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use qhpc_core::accounting::{Accounting, JobMeta, Period, Project, Reservation, Resource, UsageRecord};
use serde::{Deserialize, Serialize};

use crate::config::to_units;
use crate::{ApiError, ApiResult};

type Acc = State<Arc<Accounting>>;

pub fn router(accounting: Arc<Accounting>) -> Router {
    Router::new()
        .route("/projects", post(open_project))
        .route("/projects/{id}", get(project))
        .route("/projects/{id}/approve", post(approve))
        .route("/projects/{id}/allocations", get(allocations))
        .route("/projects/{id}/report", get(report))
        .route("/reservations", post(reserve))
        .route("/reservations/{id}", get(reservation))
        .route("/reservations/{id}/commit", post(commit))
        .route("/reservations/{id}/release", post(release))
        .with_state(accounting)
}

/// Amounts on the wire are in reported units: shots, or seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservationView {
    pub reservation_id: String,
    pub project_id: String,
    pub resource: Resource,
    pub amount: f64,
    pub state: qhpc_core::accounting::ReservationState,
}

impl From<Reservation> for ReservationView {
    fn from(r: Reservation) -> Self {
        Self {
            amount: r.resource.to_display_units(r.amount),
            reservation_id: r.reservation_id,
            project_id: r.project_id,
            resource: r.resource,
            state: r.state,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecordView {
    pub record_id: u64,
    pub project_id: String,
    pub job_id: String,
    pub resource: Resource,
    pub amount: f64,
    pub started_at: f64,
    pub finished_at: f64,
}

impl From<UsageRecord> for UsageRecordView {
    fn from(r: UsageRecord) -> Self {
        Self {
            amount: r.resource.to_display_units(r.amount),
            record_id: r.record_id,
            project_id: r.project_id,
            job_id: r.job_id,
            resource: r.resource,
            started_at: r.started_at,
            finished_at: r.finished_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationView {
    pub granted: f64,
    pub used: f64,
    pub reserved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportView {
    pub project_id: String,
    pub from: Option<f64>,
    pub to: Option<f64>,
    pub totals: BTreeMap<Resource, f64>,
    pub records: usize,
    pub jobs: usize,
    pub jobs_by_resource: BTreeMap<Resource, usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OpenBody {
    project_id: Option<String>,
    members: Vec<String>,
}

async fn open_project(State(acc): Acc, Json(body): Json<OpenBody>) -> ApiResult<(StatusCode, Json<Project>)> {
    let id = match body.project_id {
        Some(id) => acc.open_project_named(&id, body.members)?,
        None => acc.open_project(body.members)?,
    };
    Ok((StatusCode::CREATED, Json(acc.project(&id)?)))
}

async fn project(State(acc): Acc, Path(id): Path<String>) -> ApiResult<Json<Project>> {
    Ok(Json(acc.project(&id)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ApproveBody {
    grants: BTreeMap<Resource, f64>,
}

async fn approve(State(acc): Acc, Path(id): Path<String>, Json(body): Json<ApproveBody>) -> ApiResult<Json<Project>> {
    let grants = body
        .grants
        .iter()
        .map(|(&r, &v)| to_units(r, v).map(|u| (r, u)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(ApiError::bad_request)?;
    acc.approve_project(&id, &grants)?;
    Ok(Json(acc.project(&id)?))
}

async fn allocations(State(acc): Acc, Path(id): Path<String>) -> ApiResult<Json<BTreeMap<Resource, AllocationView>>> {
    acc.project(&id)?;
    let mut out = BTreeMap::new();
    for r in Resource::ALL {
        let a = acc.allocation(&id, r)?;
        out.insert(
            r,
            AllocationView {
                granted: r.to_display_units(a.granted),
                used: r.to_display_units(a.used),
                reserved: r.to_display_units(a.reserved),
            },
        );
    }
    Ok(Json(out))
}

#[derive(Deserialize)]
struct ReportQuery {
    from: Option<f64>,
    to: Option<f64>,
}

async fn report(State(acc): Acc, Path(id): Path<String>, Query(q): Query<ReportQuery>) -> ApiResult<Json<ReportView>> {
    let all = Period::all();
    let period = Period {
        from: q.from.unwrap_or(all.from),
        to: q.to.unwrap_or(all.to),
    };
    let rep = acc.usage_report(&id, period)?;
    Ok(Json(ReportView {
        project_id: id,
        from: q.from,
        to: q.to,
        totals: rep.totals.iter().map(|(&r, &v)| (r, r.to_display_units(v))).collect(),
        records: rep.records,
        jobs: rep.jobs,
        jobs_by_resource: rep.jobs_by_resource,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReserveBody {
    project_id: String,
    resource: Resource,
    amount: f64,
}

async fn reserve(State(acc): Acc, Json(body): Json<ReserveBody>) -> ApiResult<(StatusCode, Json<ReservationView>)> {
    let units = to_units(body.resource, body.amount).map_err(ApiError::bad_request)?;
    let id = acc.reserve(&body.project_id, body.resource, units)?;
    Ok((StatusCode::CREATED, Json(acc.reservation(&id)?.into())))
}

async fn reservation(State(acc): Acc, Path(id): Path<String>) -> ApiResult<Json<ReservationView>> {
    Ok(Json(acc.reservation(&id)?.into()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommitBody {
    actual: f64,
    job_id: String,
    started_at: f64,
    finished_at: f64,
}

async fn commit(State(acc): Acc, Path(id): Path<String>, Json(body): Json<CommitBody>) -> ApiResult<Json<UsageRecordView>> {
    let res = acc.reservation(&id)?;
    let actual = if body.actual == 0.0 {
        0
    } else {
        to_units(res.resource, body.actual).map_err(ApiError::bad_request)?
    };
    let meta = JobMeta {
        job_id: body.job_id,
        started_at: body.started_at,
        finished_at: body.finished_at,
    };
    Ok(Json(acc.commit_usage(&id, actual, &meta)?.into()))
}

async fn release(State(acc): Acc, Path(id): Path<String>) -> ApiResult<Json<ReservationView>> {
    acc.release(&id)?;
    Ok(Json(acc.reservation(&id)?.into()))
}
