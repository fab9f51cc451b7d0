//! Serves the mock backends over the wire protocol, for local runs and
//! protocol tests.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gaa_core::backend::mock::{MockCandidates, MockGenerator, MockQa};
use gaa_core::backend::{
    BackendError, CandidateExtractor, CandidatesRequest, ErrorBody, GenerateRequest, QaModel, QaRequest,
    QuestionGenerator,
};
use serde::Serialize;

pub struct MockBackend {
    pub generator: MockGenerator,
    pub qa: MockQa,
}

impl MockBackend {
    pub fn new(generator_id: &str, seed: u64, qa_skill: f64) -> Self {
        MockBackend { generator: MockGenerator::new(generator_id, seed), qa: MockQa::new(seed, qa_skill) }
    }
}

pub(crate) fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

fn reply<T: Serialize>(result: Result<T, BackendError>) -> Response {
    match result {
        Ok(body) => Json(body).into_response(),
        Err(BackendError::Precondition(e)) => error_response(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn generate(State(b): State<Arc<MockBackend>>, body: Result<Json<GenerateRequest>, JsonRejection>) -> Response {
    match body {
        Ok(Json(req)) if req.n == 0 => error_response(StatusCode::BAD_REQUEST, "n must be at least 1"),
        Ok(Json(req)) if !(req.top_p > 0.0 && req.top_p <= 1.0) => {
            error_response(StatusCode::BAD_REQUEST, "top_p must lie in (0, 1]")
        }
        Ok(Json(req)) => reply(b.generator.generate(&req)),
        Err(e) => error_response(StatusCode::BAD_REQUEST, e.body_text()),
    }
}

async fn qa(State(b): State<Arc<MockBackend>>, body: Result<Json<QaRequest>, JsonRejection>) -> Response {
    match body {
        Ok(Json(req)) if req.question.trim().is_empty() => error_response(StatusCode::BAD_REQUEST, "question is empty"),
        Ok(Json(req)) => reply(b.qa.answer(&req)),
        Err(e) => error_response(StatusCode::BAD_REQUEST, e.body_text()),
    }
}

async fn candidates(State(_): State<Arc<MockBackend>>, body: Result<Json<CandidatesRequest>, JsonRejection>) -> Response {
    match body {
        Ok(Json(req)) if req.max == 0 => error_response(StatusCode::BAD_REQUEST, "max must be at least 1"),
        Ok(Json(req)) => reply(MockCandidates.candidates(&req)),
        Err(e) => error_response(StatusCode::BAD_REQUEST, e.body_text()),
    }
}

pub fn mock_router(backend: Arc<MockBackend>) -> Router {
    Router::new()
        .route("/", get(|| async { "ok" }))
        .route("/v1/generate", post(generate))
        .route("/v1/qa", post(qa))
        .route("/v1/candidates", post(candidates))
        .with_state(backend)
}
