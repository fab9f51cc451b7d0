//! The platform's HTTP surface. Handlers run platform calls on the blocking
//! pool since they may wait on model backends.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gaa_core::annotation::{AnnotationSession, Validity, EXAMPLES_PER_SESSION};
use gaa_core::backend::AnswerSpan;
use gaa_core::metrics::{ExportMetadata, SquadDataset};
use gaa_core::platform::{Platform, PlatformError};
use gaa_core::prompt::PromptError;
use gaa_core::setting::{CollectionMode, ExperimentSetting};
use gaa_core::validation::{ValidationError, Verdict};
use serde::{Deserialize, Serialize};

use crate::http_backend::HttpBackend;
use crate::mock_server::error_response;

#[derive(Clone)]
pub struct AppState {
    pub platform: Arc<Platform>,
    /// Backends reported by the health endpoint.
    pub probes: Arc<Vec<(String, Arc<HttpBackend>)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSessionRequest {
    pub worker_id: String,
    /// Pins a setting label; normally the platform picks one.
    #[serde(default)]
    pub setting: Option<String>,
}

/// What a writer sees. The assistant's training source and sampler stay
/// hidden so writers are blind to the condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub worker_id: String,
    pub passage_id: String,
    pub title: String,
    pub passage: String,
    pub examples_submitted: usize,
    pub examples_required: usize,
    pub adversarial: bool,
    pub assisted: bool,
    pub answer_prompting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRequest {
    #[serde(default)]
    pub answer: Option<AnswerSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptView {
    pub prompt_id: String,
    pub question: String,
    pub answer: AnswerSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub question: String,
    pub answer: AnswerSpan,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatorQuery {
    pub validator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteRequest {
    pub validator: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteView {
    pub task_id: String,
    pub votes_cast: usize,
    pub resolution: Validity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingQuery {
    #[serde(default)]
    pub setting: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportView {
    pub dataset: SquadDataset,
    pub metadata: ExportMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub events: u64,
    pub backends: Vec<BackendHealth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendHealth {
    pub name: String,
    pub url: String,
    pub reachable: bool,
}

fn status_of(e: &PlatformError) -> StatusCode {
    match e {
        PlatformError::UnknownSession(_) | PlatformError::Validation(ValidationError::UnknownTask(_)) => {
            StatusCode::NOT_FOUND
        }
        PlatformError::SessionComplete(_)
        | PlatformError::RoleConflict { .. }
        | PlatformError::SettingConflict { .. }
        | PlatformError::Corpus(_)
        | PlatformError::Validation(_) => StatusCode::CONFLICT,
        PlatformError::Setting(_)
        | PlatformError::Span(_)
        | PlatformError::InvalidRequest(_)
        | PlatformError::Prompt(PromptError::InvalidRequest(_)) => StatusCode::BAD_REQUEST,
        PlatformError::Prompt(_) => StatusCode::SERVICE_UNAVAILABLE,
        PlatformError::Backend(_) => StatusCode::BAD_GATEWAY,
        PlatformError::Storage(_) | PlatformError::Replay(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn platform_error(e: PlatformError) -> Response {
    let status = status_of(&e);
    if status == StatusCode::INTERNAL_SERVER_ERROR {
        tracing::error!(error = %e, "request failed");
        return error_response(status, "internal error");
    }
    error_response(status, e.to_string())
}

async fn blocking<T, F>(f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> Result<T, PlatformError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(body)) => Json(body).into_response(),
        Ok(Err(e)) => platform_error(e),
        Err(e) => {
            tracing::error!(error = %e, "request task failed");
            error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
        }
    }
}

fn view(platform: &Platform, s: &AnnotationSession) -> SessionView {
    let passage = platform.corpus().get(&s.passage_id).expect("sessions reference stored passages");
    SessionView {
        session_id: s.session_id.clone(),
        worker_id: s.worker_id.clone(),
        passage_id: s.passage_id.clone(),
        title: passage.page_title.clone(),
        passage: passage.text.clone(),
        examples_submitted: s.example_ids.len(),
        examples_required: EXAMPLES_PER_SESSION,
        adversarial: s.setting.collection_mode == CollectionMode::Adversarial,
        assisted: s.setting.gaa.is_some(),
        answer_prompting: s.setting.answer_prompting,
    }
}

fn parse_setting(label: &str) -> Result<ExperimentSetting, PlatformError> {
    // an unescaped '+' in a query string arrives as a space
    Ok(label.replace(' ', "+").parse::<ExperimentSetting>()?)
}

async fn start_session(State(app): State<AppState>, body: Result<Json<StartSessionRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.body_text()),
    };
    blocking(move || {
        let setting = req.setting.as_deref().map(parse_setting).transpose()?;
        let s = app.platform.start_session(&req.worker_id, setting)?;
        Ok(view(&app.platform, &s))
    })
    .await
}

async fn request_prompt(
    State(app): State<AppState>,
    Path(session_id): Path<String>,
    body: Result<Json<PromptRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.body_text()),
    };
    blocking(move || {
        let p = app.platform.request_prompt(&session_id, req.answer.as_ref())?;
        Ok(PromptView { prompt_id: p.id, question: p.question, answer: p.answer })
    })
    .await
}

async fn submit(
    State(app): State<AppState>,
    Path(session_id): Path<String>,
    body: Result<Json<SubmitRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.body_text()),
    };
    blocking(move || {
        app.platform.submit_example(&session_id, &req.question, &req.answer, req.idempotency_key.as_deref())
    })
    .await
}

async fn next_validation(State(app): State<AppState>, query: Result<Query<ValidatorQuery>, QueryRejection>) -> Response {
    let Query(q) = match query {
        Ok(q) => q,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.body_text()),
    };
    match tokio::task::spawn_blocking(move || app.platform.next_validation(&q.validator)).await {
        Ok(Ok(Some(a))) => Json(a).into_response(),
        Ok(Ok(None)) => StatusCode::NO_CONTENT.into_response(),
        Ok(Err(e)) => platform_error(e),
        Err(_) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal error"),
    }
}

async fn vote(
    State(app): State<AppState>,
    Path(task_id): Path<String>,
    body: Result<Json<VoteRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.body_text()),
    };
    blocking(move || {
        let t = app.platform.cast_vote(&task_id, &req.validator, req.verdict, req.idempotency_key.as_deref())?;
        Ok(VoteView { task_id: t.task_id, votes_cast: t.votes.len(), resolution: t.resolution })
    })
    .await
}

async fn metrics(State(app): State<AppState>, query: Result<Query<SettingQuery>, QueryRejection>) -> Response {
    let Query(q) = match query {
        Ok(q) => q,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.body_text()),
    };
    match q.setting {
        Some(label) => blocking(move || Ok(app.platform.report(&parse_setting(&label)?))).await,
        None => blocking(move || Ok(app.platform.reports())).await,
    }
}

async fn export(State(app): State<AppState>, query: Result<Query<SettingQuery>, QueryRejection>) -> Response {
    let label = match query {
        Ok(Query(SettingQuery { setting: Some(s) })) => s,
        Ok(_) => return error_response(StatusCode::BAD_REQUEST, "the setting parameter is required"),
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.body_text()),
    };
    blocking(move || {
        let (dataset, metadata) = app.platform.export(&parse_setting(&label)?)?;
        Ok(ExportView { dataset, metadata })
    })
    .await
}

async fn health(State(app): State<AppState>) -> Response {
    let probes = app.probes.clone();
    let events = app.platform.event_count();
    let backends = tokio::task::spawn_blocking(move || {
        probes
            .iter()
            .map(|(name, b)| BackendHealth { name: name.clone(), url: b.base_url().to_owned(), reachable: b.probe() })
            .collect::<Vec<_>>()
    })
    .await
    .unwrap_or_default();
    Json(Health { status: "ok".into(), events, backends }).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/sessions", post(start_session))
        .route("/v1/sessions/{id}/prompt", post(request_prompt))
        .route("/v1/sessions/{id}/submit", post(submit))
        .route("/v1/validation/next", get(next_validation))
        .route("/v1/validation/{task_id}/vote", post(vote))
        .route("/v1/metrics", get(metrics))
        .route("/v1/export", get(export))
        .route("/v1/health", get(health))
        .with_state(state)
}
