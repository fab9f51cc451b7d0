//! Question prompt caching, scoring and strategy-ordered serving.
//!
//! Questions are generated ahead of time for every answer candidate of a
//! passage and scored once against the QA adversary. Serving pops the best
//! prompt for the requested strategy; a prompt leaves the cache the moment it
//! is served and is never served again to anyone. When nothing suitable is
//! cached the engine generates and scores questions on the spot.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    extract_answer_candidates, generate_questions, predict_answer, AnswerSpan, BackendError,
    CandidateExtractor, GeneratedQuestion, QaModel, QuestionGenerator,
};
use crate::corpus::Passage;
use crate::seed;
use crate::text::{f1_overlap, normalize};

/// Candidate cap per passage during prewarm and answer prompting.
pub const MAX_ANSWER_CANDIDATES: usize = 20;
pub const DEFAULT_CACHE_DEPTH: usize = 10;
pub const DEFAULT_TOP_P: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Likelihood,
    Adversarial,
    Uncertainty,
}

impl SamplingStrategy {
    pub const ALL: [SamplingStrategy; 3] =
        [SamplingStrategy::Likelihood, SamplingStrategy::Adversarial, SamplingStrategy::Uncertainty];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplingStrategy::Likelihood => "likelihood",
            SamplingStrategy::Adversarial => "adversarial",
            SamplingStrategy::Uncertainty => "uncertainty",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Cached,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// The annotator picked the answer; the prompt is a question for it.
    QuestionOnly,
    /// The engine picks the answer and serves it with a question.
    AnswerAndQuestion,
}

/// Identifies one answer of one passage in the cache. Answers that start at
/// the same character and normalize identically share a key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub passage_id: String,
    pub char_start: usize,
    pub answer_norm: String,
}

impl CacheKey {
    pub fn new(passage_id: &str, answer: &AnswerSpan) -> Self {
        CacheKey {
            passage_id: passage_id.to_owned(),
            char_start: answer.char_start,
            answer_norm: normalize(&answer.text).joined(),
        }
    }
}

/// A generated question with every sampler's score attached. `adversary_f1`
/// and `qa_confidence` are `None` when the QA query failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrompt {
    pub id: String,
    pub generator_id: String,
    pub passage_id: String,
    pub question: String,
    pub answer: AnswerSpan,
    pub log_likelihood: f64,
    pub adversary_f1: Option<f64>,
    pub qa_confidence: Option<f64>,
    pub origin: Origin,
}

impl ScoredPrompt {
    pub fn key(&self) -> CacheKey {
        CacheKey::new(&self.passage_id, &self.answer)
    }

    pub fn is_scored(&self) -> bool {
        self.adversary_f1.is_some() && self.qa_confidence.is_some()
    }

    /// Unscored prompts have no adversarial or uncertainty key.
    pub fn eligible_for(&self, strategy: SamplingStrategy) -> bool {
        strategy == SamplingStrategy::Likelihood || self.is_scored()
    }
}

pub fn prompt_id(generator_id: &str, key: &CacheKey, question: &str) -> String {
    let start = key.char_start.to_string();
    let h = seed::derive(0, &[generator_id, &key.passage_id, &start, &key.answer_norm, question]);
    format!("{h:016x}")
}

fn cmp_opt(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

/// Total order used for serving. The strategy key comes first, then the
/// question text, then every remaining field so that no two distinct prompts
/// compare equal.
pub fn compare(a: &ScoredPrompt, b: &ScoredPrompt, strategy: SamplingStrategy) -> Ordering {
    let primary = match strategy {
        SamplingStrategy::Likelihood => b.log_likelihood.total_cmp(&a.log_likelihood),
        SamplingStrategy::Adversarial => cmp_opt(a.adversary_f1, b.adversary_f1),
        SamplingStrategy::Uncertainty => cmp_opt(a.qa_confidence, b.qa_confidence),
    };
    primary
        .then_with(|| a.question.cmp(&b.question))
        .then_with(|| a.answer.cmp(&b.answer))
        .then_with(|| a.passage_id.cmp(&b.passage_id))
        .then_with(|| a.log_likelihood.total_cmp(&b.log_likelihood))
        .then_with(|| cmp_opt(a.adversary_f1, b.adversary_f1))
        .then_with(|| cmp_opt(a.qa_confidence, b.qa_confidence))
        .then_with(|| a.generator_id.cmp(&b.generator_id))
        .then_with(|| a.id.cmp(&b.id))
        .then_with(|| (a.origin as u8).cmp(&(b.origin as u8)))
}

pub fn order_candidates(prompts: &[ScoredPrompt], strategy: SamplingStrategy) -> Vec<ScoredPrompt> {
    let mut out = prompts.to_vec();
    out.sort_by(|a, b| compare(a, b, strategy));
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("no prompt available: {reason}")]
    Unavailable { reason: String },
    #[error("invalid prompt request: {0}")]
    InvalidRequest(String),
}

/// Queues and the served set; compared directly in replay checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CacheState {
    pub queues: BTreeMap<CacheKey, Vec<ScoredPrompt>>,
    pub served: BTreeSet<String>,
}

impl CacheState {
    fn take_best(
        &mut self,
        keys: &[CacheKey],
        strategy: SamplingStrategy,
    ) -> Option<ScoredPrompt> {
        let mut best: Option<(&CacheKey, usize, &ScoredPrompt)> = None;
        for key in keys {
            let Some(queue) = self.queues.get(key) else { continue };
            for (i, p) in queue.iter().enumerate() {
                if !p.eligible_for(strategy) {
                    continue;
                }
                if best.is_none_or(|(_, _, b)| compare(p, b, strategy) == Ordering::Less) {
                    best = Some((key, i, p));
                }
            }
        }
        let (key, idx) = best.map(|(k, i, _)| (k.clone(), i))?;
        let queue = self.queues.get_mut(&key).expect("key exists");
        let prompt = queue.remove(idx);
        if queue.is_empty() {
            self.queues.remove(&key);
        }
        self.served.insert(prompt.id.clone());
        Some(prompt)
    }
}

/// Prompt store for one generator. All methods take `&self`; each pop is a
/// single critical section, so concurrent sessions never receive the same
/// prompt.
#[derive(Debug)]
pub struct PromptCache {
    generator_id: String,
    state: Mutex<CacheState>,
}

impl Clone for PromptCache {
    fn clone(&self) -> Self {
        PromptCache { generator_id: self.generator_id.clone(), state: Mutex::new(self.snapshot()) }
    }
}

/// One line of a persisted cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub passage_id: String,
    pub answer: AnswerSpan,
    pub question: String,
    pub log_likelihood: f64,
    pub adversary_f1: Option<f64>,
    pub qa_confidence: Option<f64>,
}

impl PromptCache {
    pub fn new(generator_id: impl Into<String>) -> Self {
        PromptCache { generator_id: generator_id.into(), state: Mutex::new(CacheState::default()) }
    }

    pub fn generator_id(&self) -> &str {
        &self.generator_id
    }

    pub fn snapshot(&self) -> CacheState {
        self.state.lock().unwrap().clone()
    }

    /// Adds prompts not already queued or served. Returns how many were added.
    pub fn insert(&self, prompts: impl IntoIterator<Item = ScoredPrompt>) -> usize {
        let mut state = self.state.lock().unwrap();
        let mut added = 0;
        for p in prompts {
            if state.served.contains(&p.id) {
                continue;
            }
            let queue = state.queues.entry(p.key()).or_default();
            if queue.iter().any(|q| q.id == p.id) {
                continue;
            }
            queue.push(p);
            added += 1;
        }
        added
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().queues.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queued(&self, key: &CacheKey) -> Vec<ScoredPrompt> {
        self.state.lock().unwrap().queues.get(key).cloned().unwrap_or_default()
    }

    pub fn is_served(&self, prompt_id: &str) -> bool {
        self.state.lock().unwrap().served.contains(prompt_id)
    }

    /// Pops the strategy-first eligible prompt for `key`.
    pub fn pop(&self, key: &CacheKey, strategy: SamplingStrategy) -> Option<ScoredPrompt> {
        self.state.lock().unwrap().take_best(std::slice::from_ref(key), strategy)
    }

    /// Pops the strategy-first eligible prompt over every key of a passage.
    pub fn pop_for_passage(&self, passage_id: &str, strategy: SamplingStrategy) -> Option<ScoredPrompt> {
        let mut state = self.state.lock().unwrap();
        let keys: Vec<CacheKey> =
            state.queues.keys().filter(|k| k.passage_id == passage_id).cloned().collect();
        state.take_best(&keys, strategy)
    }

    /// Serves the best freshly generated prompt that nobody has seen yet.
    pub fn claim_live(
        &self,
        candidates: &[ScoredPrompt],
        strategy: SamplingStrategy,
    ) -> Option<ScoredPrompt> {
        let mut state = self.state.lock().unwrap();
        let best = candidates
            .iter()
            .filter(|p| p.eligible_for(strategy) && !state.served.contains(&p.id))
            .min_by(|a, b| compare(a, b, strategy))?
            .clone();
        state.served.insert(best.id.clone());
        // a live duplicate of a queued prompt must not be served again later
        let key = best.key();
        if let Some(queue) = state.queues.get_mut(&key) {
            queue.retain(|q| q.id != best.id);
            if queue.is_empty() {
                state.queues.remove(&key);
            }
        }
        Some(best)
    }

    /// Applies a serve that happened elsewhere (event replay).
    pub fn mark_served(&self, prompt: &ScoredPrompt) {
        let mut state = self.state.lock().unwrap();
        state.served.insert(prompt.id.clone());
        let key = prompt.key();
        if let Some(queue) = state.queues.get_mut(&key) {
            queue.retain(|q| q.id != prompt.id);
            if queue.is_empty() {
                state.queues.remove(&key);
            }
        }
    }

    pub fn to_jsonl(&self) -> String {
        let state = self.state.lock().unwrap();
        let mut out = String::new();
        for p in state.queues.values().flatten() {
            let record = CacheRecord {
                passage_id: p.passage_id.clone(),
                answer: p.answer.clone(),
                question: p.question.clone(),
                log_likelihood: p.log_likelihood,
                adversary_f1: p.adversary_f1,
                qa_confidence: p.qa_confidence,
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn load_jsonl<R: BufRead>(
        generator_id: impl Into<String>,
        reader: R,
    ) -> Result<Self, CacheLoadError> {
        let cache = PromptCache::new(generator_id);
        let mut prompts = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| CacheLoadError { line: idx + 1, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let r: CacheRecord = serde_json::from_str(&line)
                .map_err(|e| CacheLoadError { line: idx + 1, message: e.to_string() })?;
            let key = CacheKey::new(&r.passage_id, &r.answer);
            prompts.push(ScoredPrompt {
                id: prompt_id(&cache.generator_id, &key, &r.question),
                generator_id: cache.generator_id.clone(),
                passage_id: r.passage_id,
                question: r.question,
                answer: r.answer,
                log_likelihood: r.log_likelihood,
                adversary_f1: r.adversary_f1,
                qa_confidence: r.qa_confidence,
                origin: Origin::Cached,
            });
        }
        cache.insert(prompts);
        Ok(cache)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed cache record on line {line}: {message}")]
pub struct CacheLoadError {
    pub line: usize,
    pub message: String,
}

/// The three backends one generator-assisted setting talks to.
#[derive(Clone, Copy)]
pub struct PromptBackends<'a> {
    pub generator: &'a dyn QuestionGenerator,
    pub qa: &'a dyn QaModel,
    pub candidates: &'a dyn CandidateExtractor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    pub depth: usize,
    pub top_p: f64,
}

impl Default for PromptParams {
    fn default() -> Self {
        PromptParams { depth: DEFAULT_CACHE_DEPTH, top_p: DEFAULT_TOP_P }
    }
}

/// Scores a generated question with one QA query. A failed query yields an
/// unscored prompt rather than an error.
pub fn score_question(
    qa: &dyn QaModel,
    passage: &Passage,
    answer: &AnswerSpan,
    generated: GeneratedQuestion,
    origin: Origin,
) -> ScoredPrompt {
    let key = CacheKey::new(&passage.id, answer);
    let (adversary_f1, qa_confidence) = match predict_answer(qa, passage, &generated.question) {
        Ok(pred) => (Some(f1_overlap(&pred.span.text, &answer.text).value), Some(pred.confidence)),
        Err(e) => {
            tracing::debug!(passage = %passage.id, error = %e, "prompt scoring failed");
            (None, None)
        }
    };
    ScoredPrompt {
        id: prompt_id(&generated.generator_id, &key, &generated.question),
        generator_id: generated.generator_id,
        passage_id: passage.id.clone(),
        question: generated.question,
        answer: answer.clone(),
        log_likelihood: generated.log_likelihood,
        adversary_f1,
        qa_confidence,
        origin,
    }
}

fn generate_scored(
    passage: &Passage,
    answer: &AnswerSpan,
    backends: PromptBackends<'_>,
    params: PromptParams,
    origin: Origin,
) -> Result<Vec<ScoredPrompt>, BackendError> {
    let generated = generate_questions(backends.generator, passage, answer, params.depth, params.top_p)?;
    Ok(generated
        .into_iter()
        .map(|g| score_question(backends.qa, passage, answer, g, origin))
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrewarmReport {
    pub candidates: usize,
    pub cached: usize,
    pub unscored: usize,
    /// Keys skipped because generation failed, with the error.
    pub failures: Vec<(Option<CacheKey>, String)>,
}

/// Generates and scores up to `depth` questions for each answer candidate of
/// `passage` and queues them. Re-running against the same backends adds
/// nothing.
pub fn prewarm(
    cache: &PromptCache,
    passage: &Passage,
    backends: PromptBackends<'_>,
    params: PromptParams,
) -> Result<PrewarmReport, PromptError> {
    if params.depth == 0 {
        return Err(PromptError::InvalidRequest("cache depth must be at least 1".into()));
    }
    let mut report = PrewarmReport::default();
    let candidates =
        match extract_answer_candidates(backends.candidates, passage, MAX_ANSWER_CANDIDATES) {
            Ok(c) => c,
            Err(e) => {
                report.failures.push((None, e.to_string()));
                return Ok(report);
            }
        };
    report.candidates = candidates.len();
    for cand in candidates {
        match generate_scored(passage, &cand.span, backends, params, Origin::Cached) {
            Ok(prompts) => {
                report.unscored += prompts.iter().filter(|p| !p.is_scored()).count();
                report.cached += cache.insert(prompts);
            }
            Err(e) => report.failures.push((Some(CacheKey::new(&passage.id, &cand.span)), e.to_string())),
        }
    }
    Ok(report)
}

/// Serves one prompt, falling back to live generation when the cache has
/// nothing eligible for the request.
pub fn next_prompt(
    cache: &PromptCache,
    passage: &Passage,
    backends: PromptBackends<'_>,
    params: PromptParams,
    answer: Option<&AnswerSpan>,
    strategy: SamplingStrategy,
    mode: PromptMode,
) -> Result<ScoredPrompt, PromptError> {
    match mode {
        PromptMode::QuestionOnly => {
            let answer = answer.ok_or_else(|| {
                PromptError::InvalidRequest("an answer is required for question prompts".into())
            })?;
            if !answer.is_valid_in(&passage.text) {
                return Err(PromptError::InvalidRequest("answer is not a span of the passage".into()));
            }
            if let Some(p) = cache.pop(&CacheKey::new(&passage.id, answer), strategy) {
                return Ok(p);
            }
            let live = generate_scored(passage, answer, backends, params, Origin::Live)
                .map_err(|e| PromptError::Unavailable { reason: e.to_string() })?;
            cache.claim_live(&live, strategy).ok_or_else(|| PromptError::Unavailable {
                reason: "live generation produced no unseen question".into(),
            })
        }
        PromptMode::AnswerAndQuestion => {
            if let Some(p) = cache.pop_for_passage(&passage.id, strategy) {
                return Ok(p);
            }
            let candidates =
                extract_answer_candidates(backends.candidates, passage, MAX_ANSWER_CANDIDATES)
                    .map_err(|e| PromptError::Unavailable { reason: e.to_string() })?;
            let mut last_err = None;
            for cand in candidates {
                match generate_scored(passage, &cand.span, backends, params, Origin::Live) {
                    Ok(live) => {
                        if let Some(p) = cache.claim_live(&live, strategy) {
                            return Ok(p);
                        }
                    }
                    Err(e) => last_err = Some(e.to_string()),
                }
            }
            Err(PromptError::Unavailable {
                reason: last_err.unwrap_or_else(|| "no answer candidate yielded an unseen question".into()),
            })
        }
    }
}
