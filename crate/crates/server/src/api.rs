use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as JsonValue};
use stagehand_core::iac::StateStore;
use stagehand_core::pipeline::{Cause, Decision, Engine, EngineError, Run, DEFAULT_LOG_PAGE};

pub struct AppState {
    pub engine: Engine,
    pub infra_state: PathBuf,
    pub webhook_token: Option<String>,
}

type Shared = State<Arc<AppState>>;

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (status, code) = match &e {
            EngineError::UnknownPipeline(_) => (StatusCode::NOT_FOUND, "unknown_pipeline"),
            EngineError::UnknownRun(_) => (StatusCode::NOT_FOUND, "unknown_run"),
            EngineError::NotWaiting { .. } => (StatusCode::CONFLICT, "not_waiting"),
            EngineError::InvalidRevision(_) => (StatusCode::BAD_REQUEST, "invalid_revision"),
            EngineError::Scm(_) => (StatusCode::BAD_REQUEST, "scm_error"),
            EngineError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// An empty body reads as `T::default()`.
fn optional_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/api/pipelines", get(list_pipelines))
        .route("/api/pipelines/{name}/runs", get(list_runs).post(trigger_run))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/log", get(get_log))
        .route("/api/runs/{id}/approval", post(post_approval))
        .route("/api/webhooks/{pipeline}", post(webhook))
        .route("/api/infra/state", get(infra_state))
        .route("/api/metrics/runs", get(run_metrics))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

async fn index() -> Html<&'static str> {
    Html(include_str!("index.html"))
}

#[derive(Serialize)]
struct PipelineSummary<'a> {
    name: &'a str,
    stages: Vec<&'a str>,
    poll_interval_s: Option<f64>,
    webhook: bool,
}

async fn list_pipelines(State(s): Shared) -> Json<JsonValue> {
    let list: Vec<PipelineSummary> = s
        .engine
        .pipelines()
        .map(|p| PipelineSummary {
            name: &p.name,
            stages: p.stage_names(),
            poll_interval_s: p.trigger.poll_interval_s,
            webhook: p.trigger.webhook,
        })
        .collect();
    Json(serde_json::to_value(list).expect("summaries serialize"))
}

#[derive(Deserialize)]
struct Limit {
    limit: Option<usize>,
}

async fn list_runs(State(s): Shared, Path(name): Path<String>, q: Result<Query<Limit>, QueryRejection>) -> ApiResult<Json<Vec<Run>>> {
    let limit = q?.limit.unwrap_or(20);
    Ok(Json(s.engine.runs(&name, limit)?))
}

#[derive(Deserialize, Default)]
struct TriggerBody {
    revision: Option<String>,
}

async fn enqueue(s: Arc<AppState>, pipeline: String, revision: Option<String>, cause: Cause) -> ApiResult<Response> {
    let run = tokio::task::spawn_blocking(move || s.engine.enqueue(&pipeline, revision.as_deref(), cause))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok((StatusCode::CREATED, Json(run)).into_response())
}

async fn trigger_run(State(s): Shared, Path(name): Path<String>, body: Bytes) -> ApiResult<Response> {
    let body: TriggerBody = optional_body(&body)?;
    enqueue(s, name, body.revision, Cause::Manual).await
}

async fn get_run(State(s): Shared, Path(id): Path<String>) -> ApiResult<Json<Run>> {
    Ok(Json(s.engine.run(&id)?))
}

#[derive(Deserialize)]
struct LogQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn get_log(State(s): Shared, Path(id): Path<String>, q: Result<Query<LogQuery>, QueryRejection>) -> ApiResult<Response> {
    let q = q?;
    let page = s.engine.log(&id, q.offset.unwrap_or(0), q.limit.unwrap_or(DEFAULT_LOG_PAGE))?;
    Ok(Json(page).into_response())
}

#[derive(Deserialize)]
struct ApprovalBody {
    decision: Decision,
    by: Option<String>,
}

async fn post_approval(State(s): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Run>> {
    let body: ApprovalBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))?;
    let by = body.by.unwrap_or_default();
    Ok(Json(s.engine.resolve_approval(&id, body.decision, &by)?))
}

async fn webhook(State(s): Shared, Path(pipeline): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let given = headers.get("x-hook-token").and_then(|v| v.to_str().ok());
    let authorized = match (&s.webhook_token, given) {
        (Some(want), Some(got)) => constant_time_eq(want.as_bytes(), got.as_bytes()),
        _ => false,
    };
    if !authorized {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong X-Hook-Token"));
    }
    let spec = s.engine.pipeline(&pipeline).ok_or_else(|| EngineError::UnknownPipeline(pipeline.clone()))?;
    if !spec.trigger.webhook {
        return Err(ApiError::new(StatusCode::CONFLICT, "webhook_disabled", format!("pipeline `{pipeline}` does not accept webhooks")));
    }
    let body: TriggerBody = optional_body(&body)?;
    enqueue(s, pipeline, body.revision, Cause::Webhook).await
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[derive(Deserialize)]
struct Reveal {
    reveal: Option<bool>,
}

/// Replaces values of attributes and outputs whose name contains
/// "password".
pub fn redact(state: &mut JsonValue) {
    fn scrub(map: &mut serde_json::Map<String, JsonValue>) {
        for (k, v) in map.iter_mut() {
            if k.to_ascii_lowercase().contains("password") {
                *v = JsonValue::String("(sensitive)".into());
            }
        }
    }
    if let Some(resources) = state.get_mut("resources").and_then(JsonValue::as_array_mut) {
        for r in resources {
            if let Some(attrs) = r.get_mut("attrs").and_then(JsonValue::as_object_mut) {
                scrub(attrs);
            }
        }
    }
    if let Some(outputs) = state.get_mut("outputs").and_then(JsonValue::as_object_mut) {
        scrub(outputs);
    }
}

async fn infra_state(State(s): Shared, q: Result<Query<Reveal>, QueryRejection>) -> ApiResult<Json<JsonValue>> {
    let reveal = q?.reveal.unwrap_or(false);
    let state = StateStore::new(&s.infra_state)
        .load()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "state_unreadable", e.to_string()))?;
    let mut v = serde_json::to_value(&state).expect("state serializes");
    if !reveal {
        redact(&mut v);
    }
    Ok(Json(v))
}

#[derive(Deserialize)]
struct MetricsQuery {
    pipeline: Option<String>,
}

async fn run_metrics(State(s): Shared, q: Result<Query<MetricsQuery>, QueryRejection>) -> ApiResult<Response> {
    let q = q?;
    if let Some(p) = &q.pipeline {
        if s.engine.pipeline(p).is_none() {
            return Err(EngineError::UnknownPipeline(p.clone()).into());
        }
    }
    Ok(Json(s.engine.metrics(q.pipeline.as_deref())).into_response())
}
