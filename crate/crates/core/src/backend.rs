//! Contracts for the three model roles and their JSON wire format.
//!
//! Backends are untrusted: every span and score that crosses this boundary is
//! re-validated here before the rest of the platform sees it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Passage;
use crate::error::PreconditionError;

pub mod mock;

/// A span of passage text addressed by character (code point) offset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub text: String,
    pub char_start: usize,
}

impl AnswerSpan {
    pub fn new(text: impl Into<String>, char_start: usize) -> Self {
        AnswerSpan { text: text.into(), char_start }
    }

    /// Builds the span covering characters `[start, end)` of `passage`.
    pub fn from_char_range(passage: &str, start: usize, end: usize) -> Option<Self> {
        if start > end || end > passage.chars().count() {
            return None;
        }
        let text: String = passage.chars().skip(start).take(end - start).collect();
        (text.chars().count() == end - start).then_some(AnswerSpan { text, char_start: start })
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn is_valid_in(&self, passage: &str) -> bool {
        let mut rest = passage.chars().skip(self.char_start);
        let mut consumed = 0usize;
        for expected in self.text.chars() {
            match rest.next() {
                Some(c) if c == expected => consumed += 1,
                _ => return false,
            }
        }
        // an empty span must still start inside the text (or at its end)
        consumed > 0 || self.char_start <= passage.chars().count()
    }

    pub fn validate(&self, passage: &str) -> Result<(), SpanError> {
        if self.is_valid_in(passage) {
            Ok(())
        } else {
            Err(SpanError { text: self.text.clone(), char_start: self.char_start })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("span {text:?} at character {char_start} does not match the passage text")]
pub struct SpanError {
    pub text: String,
    pub char_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuestion {
    pub question: String,
    pub log_likelihood: f64,
    pub generator_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPrediction {
    pub span: AnswerSpan,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCandidate {
    pub span: AnswerSpan,
    pub score: f64,
}

// Wire messages. Field order here is the serialized order.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub passage_id: String,
    pub passage: String,
    pub answer: AnswerSpan,
    pub n: usize,
    pub top_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireQuestion {
    pub question: String,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub questions: Vec<WireQuestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRequest {
    pub passage_id: String,
    pub passage: String,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaResponse {
    pub answer: AnswerSpan,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidatesRequest {
    pub passage_id: String,
    pub passage: String,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCandidate {
    pub text: String,
    pub char_start: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatesResponse {
    pub candidates: Vec<WireCandidate>,
}

/// Body of every 400 response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend at {endpoint} unreachable after {attempts} attempt(s): {message}")]
    Transport { endpoint: String, attempts: u32, message: String },
    #[error("backend at {endpoint} rejected the request ({status}): {message}")]
    Rejected { endpoint: String, status: u16, message: String },
    #[error("backend protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Precondition(#[from] PreconditionError),
}

pub trait QuestionGenerator: Send + Sync {
    /// Identifies the generator (and thus its training source) in logs.
    fn id(&self) -> &str;
    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, BackendError>;
}

pub trait QaModel: Send + Sync {
    fn answer(&self, request: &QaRequest) -> Result<QaResponse, BackendError>;
}

pub trait CandidateExtractor: Send + Sync {
    fn candidates(&self, request: &CandidatesRequest) -> Result<CandidatesResponse, BackendError>;
}

/// Asks for up to `n` questions about `answer`. Exact duplicates are dropped,
/// keeping the first occurrence.
pub fn generate_questions(
    backend: &dyn QuestionGenerator,
    passage: &Passage,
    answer: &AnswerSpan,
    n: usize,
    top_p: f64,
) -> Result<Vec<GeneratedQuestion>, BackendError> {
    if n == 0 {
        return Err(PreconditionError::new("n must be at least 1").into());
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(PreconditionError::new(format!("top_p {top_p} outside (0, 1]")).into());
    }
    answer
        .validate(&passage.text)
        .map_err(|e| PreconditionError::new(e.to_string()))?;
    let request = GenerateRequest {
        passage_id: passage.id.clone(),
        passage: passage.text.clone(),
        answer: answer.clone(),
        n,
        top_p,
    };
    let response = backend.generate(&request)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for q in response.questions {
        if q.question.trim().is_empty() {
            return Err(BackendError::Protocol("generator returned an empty question".into()));
        }
        if !q.log_likelihood.is_finite() || q.log_likelihood > 0.0 {
            return Err(BackendError::Protocol(format!(
                "log likelihood {} is not a finite non-positive number",
                q.log_likelihood
            )));
        }
        if seen.insert(q.question.clone()) {
            out.push(GeneratedQuestion {
                question: q.question,
                log_likelihood: q.log_likelihood,
                generator_id: backend.id().to_owned(),
            });
        }
        if out.len() == n {
            break;
        }
    }
    Ok(out)
}

pub fn predict_answer(
    backend: &dyn QaModel,
    passage: &Passage,
    question: &str,
) -> Result<QaPrediction, BackendError> {
    if question.trim().is_empty() {
        return Err(PreconditionError::new("question must be non-empty").into());
    }
    let response = backend.answer(&QaRequest {
        passage_id: passage.id.clone(),
        passage: passage.text.clone(),
        question: question.to_owned(),
    })?;
    response.answer.validate(&passage.text).map_err(|e| BackendError::Protocol(e.to_string()))?;
    if !(response.confidence > 0.0 && response.confidence <= 1.0) {
        return Err(BackendError::Protocol(format!(
            "confidence {} outside (0, 1]",
            response.confidence
        )));
    }
    Ok(QaPrediction { span: response.answer, confidence: response.confidence })
}

/// At most `max` valid, distinct candidates by descending score (ties by
/// position).
pub fn extract_answer_candidates(
    backend: &dyn CandidateExtractor,
    passage: &Passage,
    max: usize,
) -> Result<Vec<AnswerCandidate>, BackendError> {
    if max == 0 {
        return Err(PreconditionError::new("max must be at least 1").into());
    }
    let response = backend.candidates(&CandidatesRequest {
        passage_id: passage.id.clone(),
        passage: passage.text.clone(),
        max,
    })?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in response.candidates {
        let span = AnswerSpan { text: c.text, char_start: c.char_start };
        span.validate(&passage.text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        if !c.score.is_finite() {
            return Err(BackendError::Protocol("candidate score is not finite".into()));
        }
        if seen.insert(span.clone()) {
            out.push(AnswerCandidate { span, score: c.score });
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.span.char_start.cmp(&b.span.char_start))
            .then(a.span.text.cmp(&b.span.text))
    });
    out.truncate(max);
    Ok(out)
}
