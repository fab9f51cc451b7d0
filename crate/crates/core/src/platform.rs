//! The annotation platform: every state change goes through here, is logged
//! as an event, and is then folded into the projection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{
    compute_fooled, Accrual, AnnotationSession, ExampleRecord, PromptProvenance, Validity, DEFAULT_BONUS,
    DEFAULT_FOOLING_THRESHOLD, EXAMPLES_PER_SESSION,
};
use crate::backend::{predict_answer, AnswerSpan, BackendError, CandidateExtractor, QaModel, QaPrediction, QuestionGenerator, SpanError};
use crate::clock::Clock;
use crate::corpus::{CorpusError, Passage, PassageStore};
use crate::error::PreconditionError;
use crate::events::{
    ApplyError, BonusAccrued, Event, EventSink, ExampleSubmitted, Payload, Projection, PromptServed, Role,
    SessionStarted, ValidationAssigned, ValidationResolved, VoteCast,
};
use crate::metrics::{compute_report, export_dataset, ExportMetadata, MetricsReport, SquadDataset};
use crate::prompt::{next_prompt, CacheState, PromptBackends, PromptCache, PromptError, PromptParams, ScoredPrompt};
use crate::seed;
use crate::setting::{setting_matrix, ExperimentSetting, GaaSource, SettingError};
use crate::validation::{flagged_workers, worker_quality, QualityPolicy, ValidationError, ValidationTask, Verdict};

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Setting(#[from] SettingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Span(#[from] SpanError),
    #[error("model query failed: {0}")]
    Backend(#[from] BackendError),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` already has {EXAMPLES_PER_SESSION} examples")]
    SessionComplete(String),
    #[error("worker `{worker}` already acts as a {role:?}")]
    RoleConflict { worker: String, role: Role },
    #[error("worker `{worker}` is assigned to setting `{current}`")]
    SettingConflict { worker: String, current: ExperimentSetting },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("event log write failed: {0}")]
    Storage(#[from] std::io::Error),
    #[error("event log replay failed: {0}")]
    Replay(#[from] ApplyError),
}

impl From<PreconditionError> for PlatformError {
    fn from(e: PreconditionError) -> Self {
        PlatformError::InvalidRequest(e.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformConfig {
    pub seed: u64,
    pub fooling_threshold: f64,
    pub quality: QualityPolicy,
    pub bonus_amount: f64,
    pub prompt: PromptParams,
    /// Prepended to generated session ids.
    pub id_prefix: String,
    /// Settings a new worker may be placed in.
    pub settings: Vec<ExperimentSetting>,
    /// Settings with this many examples stop receiving new workers; 0 means
    /// no cap.
    pub target_examples_per_setting: usize,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            seed: 0,
            fooling_threshold: DEFAULT_FOOLING_THRESHOLD,
            quality: QualityPolicy::default(),
            bonus_amount: DEFAULT_BONUS,
            prompt: PromptParams::default(),
            id_prefix: String::new(),
            settings: setting_matrix(),
            target_examples_per_setting: 0,
        }
    }
}

impl PlatformConfig {
    pub fn validate(&self) -> Result<(), PreconditionError> {
        if !(self.fooling_threshold > 0.0 && self.fooling_threshold < 1.0) {
            return Err(PreconditionError::new(format!(
                "fooling threshold must lie in (0, 1), got {}",
                self.fooling_threshold
            )));
        }
        if !(self.prompt.top_p > 0.0 && self.prompt.top_p <= 1.0) {
            return Err(PreconditionError::new(format!("top_p must lie in (0, 1], got {}", self.prompt.top_p)));
        }
        if self.prompt.depth == 0 {
            return Err(PreconditionError::new("cache depth must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.quality.threshold) {
            return Err(PreconditionError::new("quality threshold must lie in [0, 1]"));
        }
        if !(self.bonus_amount >= 0.0 && self.bonus_amount.is_finite()) {
            return Err(PreconditionError::new("bonus amount must be a non-negative number"));
        }
        if self.settings.is_empty() {
            return Err(PreconditionError::new("at least one setting is required"));
        }
        for s in &self.settings {
            s.validate().map_err(|e| PreconditionError::new(e.to_string()))?;
        }
        Ok(())
    }
}

/// Model backends: one question generator per assistant training source,
/// plus the QA model and the answer-candidate extractor.
#[derive(Clone)]
pub struct Backends {
    pub generators: BTreeMap<GaaSource, Arc<dyn QuestionGenerator>>,
    pub qa: Arc<dyn QaModel>,
    pub candidates: Arc<dyn CandidateExtractor>,
}

impl Backends {
    pub fn for_source(&self, gaa: GaaSource) -> Option<PromptBackends<'_>> {
        Some(PromptBackends {
            generator: self.generators.get(&gaa)?.as_ref(),
            qa: self.qa.as_ref(),
            candidates: self.candidates.as_ref(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub example_id: String,
    pub model_prediction: Option<QaPrediction>,
    pub fooled: Option<bool>,
    pub examples_submitted: usize,
    pub session_complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationAssignment {
    pub task_id: String,
    pub passage_id: String,
    pub passage: String,
    pub question: String,
    pub answer: AnswerSpan,
}

struct State {
    projection: Projection,
    sink: Box<dyn EventSink>,
}

impl State {
    fn next_timestamp(&self, clock: &dyn Clock) -> u64 {
        clock.now_ms().max(self.projection.last_timestamp_ms + 1)
    }

    /// Appends first; the projection only changes once the event is durable.
    fn commit(&mut self, event: Event) -> Result<(), PlatformError> {
        self.sink.append(&event)?;
        self.projection.apply(&event).map_err(|e| {
            tracing::error!(error = %e, "appended event failed to apply");
            PlatformError::Replay(e)
        })
    }
}

pub struct Platform {
    config: PlatformConfig,
    corpus: PassageStore,
    backends: Backends,
    caches: BTreeMap<GaaSource, PromptCache>,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
    session_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Platform {
    /// Builds a platform and replays `history` into it. `caches` must be in
    /// the state they were in before the first event of `history`.
    pub fn open(
        config: PlatformConfig,
        corpus: PassageStore,
        backends: Backends,
        caches: BTreeMap<GaaSource, PromptCache>,
        clock: Arc<dyn Clock>,
        sink: Box<dyn EventSink>,
        history: &[Event],
    ) -> Result<Self, PlatformError> {
        config.validate()?;
        let mut caches = caches;
        for gaa in GaaSource::ALL {
            caches.entry(gaa).or_insert_with(|| PromptCache::new(gaa.as_str()));
        }
        let mut projection = Projection::new(config.bonus_amount);
        for e in history {
            projection.apply(e)?;
            if let Payload::PromptServed(p) = &e.payload {
                caches[&p.gaa].mark_served(&p.prompt);
            }
        }
        Ok(Platform {
            config,
            corpus,
            backends,
            caches,
            clock,
            state: Mutex::new(State { projection, sink }),
            session_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn corpus(&self) -> &PassageStore {
        &self.corpus
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn cache(&self, gaa: GaaSource) -> &PromptCache {
        &self.caches[&gaa]
    }

    fn state(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap()
    }

    fn session_lock(&self, session_id: &str) -> Arc<Mutex<()>> {
        self.session_locks.lock().unwrap().entry(session_id.to_owned()).or_default().clone()
    }

    pub fn snapshot(&self) -> Projection {
        self.state().projection.clone()
    }

    pub fn cache_states(&self) -> BTreeMap<GaaSource, CacheState> {
        self.caches.iter().map(|(g, c)| (*g, c.snapshot())).collect()
    }

    pub fn session(&self, session_id: &str) -> Option<AnnotationSession> {
        self.state().projection.sessions.get(session_id).cloned()
    }

    pub fn record(&self, example_id: &str) -> Option<ExampleRecord> {
        self.state().projection.examples.get(example_id).cloned()
    }

    pub fn records(&self) -> Vec<ExampleRecord> {
        self.state().projection.records().cloned().collect()
    }

    pub fn task(&self, task_id: &str) -> Option<ValidationTask> {
        self.state().projection.tasks.get(task_id).cloned()
    }

    fn pick_setting(&self, projection: &Projection, worker: &str) -> ExperimentSetting {
        let mut pool = self.config.settings.clone();
        if self.config.target_examples_per_setting > 0 {
            // reserve a full session for every active one
            let mut load: BTreeMap<ExperimentSetting, usize> = BTreeMap::new();
            for r in projection.examples.values() {
                *load.entry(r.setting).or_default() += 1;
            }
            for sid in projection.active_sessions.values() {
                let s = &projection.sessions[sid];
                *load.entry(s.setting).or_default() += EXAMPLES_PER_SESSION - s.example_ids.len();
            }
            let needy: Vec<_> = pool
                .iter()
                .copied()
                .filter(|s| load.get(s).copied().unwrap_or(0) < self.config.target_examples_per_setting)
                .collect();
            if !needy.is_empty() {
                pool = needy;
            }
        }
        let mut rng = seed::rng(self.config.seed, &["worker_setting", worker]);
        pool[rng.random_range(0..pool.len())]
    }

    /// Starts a session, or resumes the worker's active one. A worker keeps
    /// the setting of their first session; `setting` pins it explicitly.
    pub fn start_session(
        &self,
        worker: &str,
        setting: Option<ExperimentSetting>,
    ) -> Result<AnnotationSession, PlatformError> {
        if worker.trim().is_empty() {
            return Err(PlatformError::InvalidRequest("worker id must be nonempty".into()));
        }
        if let Some(s) = &setting {
            s.validate()?;
        }
        let mut state = self.state();
        let proj = &state.projection;
        if proj.roles.get(worker) == Some(&Role::Validator) {
            return Err(PlatformError::RoleConflict { worker: worker.to_owned(), role: Role::Validator });
        }
        let sticky = proj.worker_settings.get(worker).copied();
        if let (Some(current), Some(requested)) = (sticky, setting) {
            if current != requested {
                return Err(PlatformError::SettingConflict { worker: worker.to_owned(), current });
            }
        }
        if let Some(sid) = proj.active_sessions.get(worker) {
            return Ok(proj.sessions[sid].clone());
        }
        let setting = sticky.or(setting).unwrap_or_else(|| self.pick_setting(proj, worker));
        let passage = proj.assigner.draw(&self.corpus, worker, self.config.seed)?;
        let session_id = format!("{}s{}", self.config.id_prefix, proj.sessions.len());
        let event = Event {
            session_id: Some(session_id.clone()),
            worker_id: worker.to_owned(),
            setting: Some(setting),
            timestamp_ms: state.next_timestamp(self.clock.as_ref()),
            payload: Payload::SessionStarted(SessionStarted { passage_id: passage.id.clone() }),
        };
        state.commit(event)?;
        Ok(state.projection.sessions[&session_id].clone())
    }

    fn open_session(&self, session_id: &str) -> Result<(AnnotationSession, &Passage), PlatformError> {
        let session = self.session(session_id).ok_or_else(|| PlatformError::UnknownSession(session_id.to_owned()))?;
        if session.is_complete() {
            return Err(PlatformError::SessionComplete(session_id.to_owned()));
        }
        let passage = self
            .corpus
            .get(&session.passage_id)
            .ok_or_else(|| CorpusError::UnknownPassage(session.passage_id.clone()))?;
        Ok((session, passage))
    }

    /// Serves a prompt for the example being written. In answer-prompting
    /// settings the engine chooses the answer, so `answer` must be absent;
    /// otherwise it is required.
    pub fn request_prompt(&self, session_id: &str, answer: Option<&AnswerSpan>) -> Result<ScoredPrompt, PlatformError> {
        let lock = self.session_lock(session_id);
        let _guard = lock.lock().unwrap();
        let (session, passage) = self.open_session(session_id)?;
        let setting = session.setting;
        let (Some(gaa), Some(strategy)) = (setting.gaa, setting.sampler) else {
            return Err(PlatformError::InvalidRequest("this setting has no generative assistant".into()));
        };
        match (setting.answer_prompting, answer) {
            (true, Some(_)) => {
                return Err(PlatformError::InvalidRequest("the assistant proposes the answer in this setting".into()))
            }
            (false, None) => {
                return Err(PlatformError::InvalidRequest("an answer is required to request a question".into()))
            }
            _ => {}
        }
        let backends = self
            .backends
            .for_source(gaa)
            .ok_or_else(|| PromptError::Unavailable { reason: format!("no generator configured for `{}`", gaa.as_str()) })?;
        let prompt = next_prompt(
            &self.caches[&gaa],
            passage,
            backends,
            self.config.prompt,
            answer,
            strategy,
            setting.prompt_mode(),
        )?;
        let mut state = self.state();
        let event = Event {
            session_id: Some(session_id.to_owned()),
            worker_id: session.worker_id.clone(),
            setting: Some(setting),
            timestamp_ms: state.next_timestamp(self.clock.as_ref()),
            payload: Payload::PromptServed(PromptServed {
                gaa,
                strategy,
                mode: setting.prompt_mode(),
                prompt: prompt.clone(),
            }),
        };
        state.commit(event)?;
        Ok(prompt)
    }

    fn outcome_of(projection: &Projection, example_id: &str) -> SubmitOutcome {
        let r = &projection.examples[example_id];
        let s = &projection.sessions[&r.session_id];
        let position = s.example_ids.iter().position(|e| e == example_id).map_or(0, |i| i + 1);
        SubmitOutcome {
            example_id: example_id.to_owned(),
            model_prediction: r.model_prediction.clone(),
            fooled: r.fooled,
            examples_submitted: position,
            session_complete: position == EXAMPLES_PER_SESSION,
        }
    }

    /// Stores one example. In adversarial settings the QA model answers the
    /// question first and the outcome says whether it was fooled. A repeated
    /// idempotency key returns the original outcome.
    pub fn submit_example(
        &self,
        session_id: &str,
        question: &str,
        answer: &AnswerSpan,
        idempotency_key: Option<&str>,
    ) -> Result<SubmitOutcome, PlatformError> {
        let lock = self.session_lock(session_id);
        let _guard = lock.lock().unwrap();
        if let Some(k) = idempotency_key {
            let state = self.state();
            if let Some(id) = state.projection.idempotency.get(&Projection::submit_key(session_id, k)) {
                return Ok(Self::outcome_of(&state.projection, id));
            }
        }
        let (session, passage) = self.open_session(session_id)?;
        if question.trim().is_empty() {
            return Err(PlatformError::InvalidRequest("question must be nonempty".into()));
        }
        answer.validate(&passage.text)?;
        let (model_prediction, fooled) = if session.setting.is_adversarial() {
            let pred = predict_answer(self.backends.qa.as_ref(), passage, question)?;
            let fooled = compute_fooled(&pred, answer, self.config.fooling_threshold);
            (Some(pred), Some(fooled))
        } else {
            (None, None)
        };
        let mut state = self.state();
        let ts = state.next_timestamp(self.clock.as_ref());
        let example_id = session.next_example_id();
        let record = ExampleRecord {
            example_id: example_id.clone(),
            session_id: session_id.to_owned(),
            worker_id: session.worker_id.clone(),
            passage_id: passage.id.clone(),
            setting: session.setting,
            question: question.to_owned(),
            answer: answer.clone(),
            duration_ms: ts - session.activated_at_ms,
            generator_queries: session.pending_queries,
            prompt_provenance: PromptProvenance::determine(question, answer, session.last_served.as_ref()),
            model_prediction,
            fooled,
            validity: Validity::Pending,
        };
        let event = Event {
            session_id: Some(session_id.to_owned()),
            worker_id: session.worker_id.clone(),
            setting: Some(session.setting),
            timestamp_ms: ts,
            payload: Payload::ExampleSubmitted(ExampleSubmitted {
                record,
                idempotency_key: idempotency_key.map(str::to_owned),
            }),
        };
        state.commit(event)?;
        Ok(Self::outcome_of(&state.projection, &example_id))
    }

    fn assignment_for(&self, projection: &Projection, task_id: &str) -> ValidationAssignment {
        let r = &projection.examples[task_id];
        ValidationAssignment {
            task_id: task_id.to_owned(),
            passage_id: r.passage_id.clone(),
            passage: self.corpus.get(&r.passage_id).map(|p| p.text.clone()).unwrap_or_default(),
            question: r.question.clone(),
            answer: r.answer.clone(),
        }
    }

    /// The validator's outstanding assignment, or a new one from the oldest
    /// task that still needs a vote from someone like them. `None` when
    /// there is nothing to validate.
    pub fn next_validation(&self, validator: &str) -> Result<Option<ValidationAssignment>, PlatformError> {
        if validator.trim().is_empty() {
            return Err(PlatformError::InvalidRequest("validator id must be nonempty".into()));
        }
        let mut state = self.state();
        let proj = &state.projection;
        if proj.roles.get(validator) == Some(&Role::Writer) {
            return Err(PlatformError::RoleConflict { worker: validator.to_owned(), role: Role::Writer });
        }
        let outstanding = proj.example_order.iter().find(|id| {
            let t = &proj.tasks[*id];
            t.resolution == Validity::Pending
                && t.assigned.iter().any(|v| v == validator)
                && !t.votes.iter().any(|v| v.validator == validator)
        });
        if let Some(id) = outstanding {
            return Ok(Some(self.assignment_for(proj, id)));
        }
        let Some(task_id) = proj
            .example_order
            .iter()
            .find(|id| {
                let t = &proj.tasks[*id];
                t.has_open_slot() && t.is_eligible(validator)
            })
            .cloned()
        else {
            return Ok(None);
        };
        let event = Event {
            session_id: None,
            worker_id: validator.to_owned(),
            setting: Some(proj.examples[&task_id].setting),
            timestamp_ms: state.next_timestamp(self.clock.as_ref()),
            payload: Payload::ValidationAssigned(ValidationAssigned { task_id: task_id.clone() }),
        };
        state.commit(event)?;
        Ok(Some(self.assignment_for(&state.projection, &task_id)))
    }

    /// Records a vote. The third vote resolves the task, and a fooling
    /// example resolved valid earns its author the bonus.
    pub fn cast_vote(
        &self,
        task_id: &str,
        validator: &str,
        verdict: Verdict,
        idempotency_key: Option<&str>,
    ) -> Result<ValidationTask, PlatformError> {
        let mut state = self.state();
        if let Some(k) = idempotency_key {
            if state.projection.idempotency.contains_key(&Projection::vote_key(task_id, validator, k)) {
                return Ok(state.projection.tasks[task_id].clone());
            }
        }
        let task = state
            .projection
            .tasks
            .get(task_id)
            .ok_or_else(|| ValidationError::UnknownTask(task_id.to_owned()))?;
        task.check_vote(validator)?;
        let record = &state.projection.examples[task_id];
        let (setting, author, session_id) = (record.setting, record.worker_id.clone(), record.session_id.clone());
        let ts = state.next_timestamp(self.clock.as_ref());
        state.commit(Event {
            session_id: None,
            worker_id: validator.to_owned(),
            setting: Some(setting),
            timestamp_ms: ts,
            payload: Payload::VoteCast(VoteCast {
                task_id: task_id.to_owned(),
                verdict,
                idempotency_key: idempotency_key.map(str::to_owned),
            }),
        })?;
        let task = state.projection.tasks[task_id].clone();
        if task.resolution != Validity::Pending {
            let ts = state.next_timestamp(self.clock.as_ref());
            state.commit(Event {
                session_id: Some(session_id.clone()),
                worker_id: author.clone(),
                setting: Some(setting),
                timestamp_ms: ts,
                payload: Payload::ValidationResolved(ValidationResolved {
                    task_id: task_id.to_owned(),
                    resolution: task.resolution,
                    votes: task.votes.clone(),
                }),
            })?;
            let record = &state.projection.examples[task_id];
            if state.projection.bonus.check(record) == Accrual::Accrued {
                let ts = state.next_timestamp(self.clock.as_ref());
                state.commit(Event {
                    session_id: Some(session_id),
                    worker_id: author,
                    setting: Some(setting),
                    timestamp_ms: ts,
                    payload: Payload::BonusAccrued(BonusAccrued {
                        example_id: task_id.to_owned(),
                        amount: self.config.bonus_amount,
                    }),
                })?;
            }
        }
        Ok(task)
    }

    pub fn worker_quality(&self, worker: &str) -> Option<f64> {
        worker_quality(self.state().projection.tasks.values(), worker)
    }

    pub fn flagged_workers(&self) -> BTreeSet<String> {
        flagged_workers(self.state().projection.tasks.values(), &self.config.quality)
    }

    pub fn report(&self, setting: &ExperimentSetting) -> MetricsReport {
        let flagged = self.flagged_workers();
        let state = self.state();
        compute_report(state.projection.records(), setting, &flagged)
    }

    /// One report per configured setting, in configuration order.
    pub fn reports(&self) -> Vec<MetricsReport> {
        let flagged = self.flagged_workers();
        let state = self.state();
        self.config.settings.iter().map(|s| compute_report(state.projection.records(), s, &flagged)).collect()
    }

    pub fn export(&self, setting: &ExperimentSetting) -> Result<(SquadDataset, ExportMetadata), PlatformError> {
        let flagged = self.flagged_workers();
        let state = self.state();
        Ok(export_dataset(state.projection.records(), setting, &self.corpus, &flagged)?)
    }

    pub fn bonus_total(&self) -> f64 {
        self.state().projection.bonus.total()
    }

    pub fn event_count(&self) -> u64 {
        self.state().projection.event_count
    }
}
