//! HTTP surface of the control plane.
//!
//! The service drives a simulated cluster in demo mode: a ticker advances it
//! and handlers only go through the control plane, which talks to the
//! scheduler by message. Mutations need `Authorization: Bearer <token>` when
//! a token is configured. Send `X-Request-Id` to make a mutation safe to
//! retry.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::extract::{Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use edgetier::control::{
    ActionOutcome, AgentRow, ControlError, DeploymentManifest, DeploymentRequest, Placement, TaskAction, TaskFilter,
    TaskRow,
};
use edgetier::domain::{AttributeConstraint, TaskId};
use edgetier::executor::TaskLogs;
use edgetier::scheduler::Notifier;
use edgetier::simnet::Sim;

pub const REQUEST_ID_HEADER: &str = "x-request-id";

/// The running cluster, shared by the ticker and the handlers.
pub type SharedSim = Arc<Mutex<Sim>>;

#[derive(Clone)]
pub struct AppState {
    sim: SharedSim,
    token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(sim: SharedSim, token: Option<String>) -> Self {
        Self {
            sim,
            token: token.map(Into::into),
        }
    }

    fn sim(&self) -> MutexGuard<'_, Sim> {
        self.sim.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn authorize(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        let Some(token) = &self.token else {
            return Ok(());
        };
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given == Some(&**token) {
            Ok(())
        } else {
            Err(ApiError::Unauthorized)
        }
    }
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("missing or wrong bearer token")]
    Unauthorized,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// Error body for every non-2xx reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Control(e) => match e {
                ControlError::InvalidManifest(_) | ControlError::UnknownAgent(_) => StatusCode::UNPROCESSABLE_ENTITY,
                ControlError::UnknownTask(_) => StatusCode::NOT_FOUND,
                ControlError::IllegalAction(_) => StatusCode::CONFLICT,
                ControlError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
            },
        };
        let body = ErrorBody {
            error: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submitted {
    pub task_ids: Vec<TaskId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionBody {
    pub action: TaskAction,
}

#[derive(Debug, Default, Deserialize)]
struct AttributeQuery {
    /// JSON array of attribute constraints.
    #[serde(default)]
    filter: Option<String>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/tasks", post(submit).get(list_tasks))
        .route("/tasks/{id}/actions", post(task_action))
        .route("/tasks/{id}/logs", get(task_logs))
        .route("/agents", get(list_agents))
        .route("/attributes", get(list_attributes))
        .with_state(state)
}

fn request_id(headers: &HeaderMap) -> Option<String> {
    headers
        .get(REQUEST_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty())
        .map(str::to_string)
}

async fn submit(
    State(state): State<AppState>,
    headers: HeaderMap,
    mut form: Multipart,
) -> Result<(StatusCode, Json<Submitted>), ApiError> {
    state.authorize(&headers)?;
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::BadRequest(e.body_text());
    let mut manifest = None;
    let mut archive = Vec::new();
    let mut placement = Placement::Auto;
    while let Some(field) = form.next_field().await.map_err(bad)? {
        match field.name().unwrap_or_default() {
            "manifest" => manifest = Some(DeploymentManifest::parse(&field.text().await.map_err(bad)?)?),
            "archive" => archive = field.bytes().await.map_err(bad)?.to_vec(),
            "placement" => {
                let text = field.text().await.map_err(bad)?;
                placement = serde_json::from_str(&text).map_err(|e| ApiError::BadRequest(format!("placement: {e}")))?;
            }
            other => return Err(ApiError::BadRequest(format!("unexpected form field `{other}`"))),
        }
    }
    let manifest = manifest.ok_or_else(|| ApiError::BadRequest("form has no manifest".into()))?;
    let req = DeploymentRequest {
        manifest,
        archive,
        placement,
        request_id: request_id(&headers),
    };
    let task_ids = state.sim().submit(req)?;
    Ok((StatusCode::CREATED, Json(Submitted { task_ids })))
}

async fn list_tasks(
    State(state): State<AppState>,
    Query(filter): Query<TaskFilter>,
) -> Result<Json<Vec<TaskRow>>, ApiError> {
    Ok(Json(state.sim().control().list_tasks(&filter)?))
}

async fn task_action(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(body): Json<ActionBody>,
) -> Result<(StatusCode, Json<ActionOutcome>), ApiError> {
    if body.action != TaskAction::Logs {
        state.authorize(&headers)?;
    }
    let rid = request_id(&headers);
    let outcome = state.sim().task_action(&TaskId::from(id), body.action, rid.as_deref())?;
    let status = match outcome {
        ActionOutcome::Accepted { .. } => StatusCode::ACCEPTED,
        ActionOutcome::Logs { .. } => StatusCode::OK,
    };
    Ok((status, Json(outcome)))
}

async fn task_logs(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<TaskLogs>, ApiError> {
    match state.sim().task_action(&TaskId::from(id), TaskAction::Logs, None)? {
        ActionOutcome::Logs { logs, .. } => Ok(Json(logs)),
        ActionOutcome::Accepted { .. } => unreachable!("a logs action is answered in place"),
    }
}

async fn list_agents(State(state): State<AppState>) -> Result<Json<Vec<AgentRow>>, ApiError> {
    Ok(Json(state.sim().control().list_agents()?))
}

async fn list_attributes(
    State(state): State<AppState>,
    Query(q): Query<AttributeQuery>,
) -> Result<Json<BTreeMap<String, BTreeSet<String>>>, ApiError> {
    let filter: Vec<AttributeConstraint> = match q.filter.as_deref() {
        None | Some("") => Vec::new(),
        Some(text) => serde_json::from_str(text).map_err(|e| ApiError::BadRequest(format!("filter: {e}")))?,
    };
    Ok(Json(state.sim().control().list_attributes(&filter)?))
}

/// Advances the cluster one tick per `period` and hands new administrator
/// notifications to `notifiers`. Runs until the task is dropped.
pub async fn drive(sim: SharedSim, period: Duration, notifiers: Vec<Box<dyn Notifier>>) {
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let mut forwarded = 0;
    loop {
        interval.tick().await;
        let fresh = {
            let mut sim = sim.lock().unwrap_or_else(|p| p.into_inner());
            sim.step();
            let all = sim.notifications();
            let fresh = all.get(forwarded..).unwrap_or_default().to_vec();
            forwarded = all.len();
            fresh
        };
        for n in &fresh {
            for sink in &notifiers {
                sink.notify(n);
            }
        }
    }
}

pub struct ServeOptions {
    pub token: Option<String>,
    pub tick: Duration,
    pub notifiers: Vec<Box<dyn Notifier>>,
}

/// Serves the API on `listener` while driving `sim`.
pub async fn serve(listener: tokio::net::TcpListener, sim: SharedSim, opts: ServeOptions) -> std::io::Result<()> {
    let ticker = tokio::spawn(drive(sim.clone(), opts.tick, opts.notifiers));
    let app = router(AppState::new(sim, opts.token));
    let result = axum::serve(listener, app).await;
    ticker.abort();
    result
}
