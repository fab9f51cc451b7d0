//! The append-only event log, its sinks, and the projection folded from it.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Accrual, AnnotationSession, BonusLedger, ExampleRecord, Validity};
use crate::corpus::PassageAssigner;
use crate::prompt::{PromptMode, SamplingStrategy, ScoredPrompt};
use crate::setting::{ExperimentSetting, GaaSource};
use crate::validation::{ValidationTask, Verdict, Vote};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    SessionStarted,
    PromptServed,
    ExampleSubmitted,
    ValidationAssigned,
    VoteCast,
    ValidationResolved,
    BonusAccrued,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStarted {
    pub passage_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptServed {
    pub gaa: GaaSource,
    pub strategy: SamplingStrategy,
    pub mode: PromptMode,
    pub prompt: ScoredPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSubmitted {
    pub record: ExampleRecord,
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationAssigned {
    pub task_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteCast {
    pub task_id: String,
    pub verdict: Verdict,
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationResolved {
    pub task_id: String,
    pub resolution: Validity,
    pub votes: Vec<Vote>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonusAccrued {
    pub example_id: String,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    SessionStarted(SessionStarted),
    PromptServed(PromptServed),
    ExampleSubmitted(ExampleSubmitted),
    ValidationAssigned(ValidationAssigned),
    VoteCast(VoteCast),
    ValidationResolved(ValidationResolved),
    BonusAccrued(BonusAccrued),
}

impl Payload {
    pub fn event_type(&self) -> EventType {
        match self {
            Payload::SessionStarted(_) => EventType::SessionStarted,
            Payload::PromptServed(_) => EventType::PromptServed,
            Payload::ExampleSubmitted(_) => EventType::ExampleSubmitted,
            Payload::ValidationAssigned(_) => EventType::ValidationAssigned,
            Payload::VoteCast(_) => EventType::VoteCast,
            Payload::ValidationResolved(_) => EventType::ValidationResolved,
            Payload::BonusAccrued(_) => EventType::BonusAccrued,
        }
    }
}

/// One log line. `worker_id` is the author for writing events and the
/// validator for `validation_assigned` and `vote_cast`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEvent", into = "RawEvent")]
pub struct Event {
    pub session_id: Option<String>,
    pub worker_id: String,
    pub setting: Option<ExperimentSetting>,
    pub timestamp_ms: u64,
    pub payload: Payload,
}

impl Event {
    pub fn event_type(&self) -> EventType {
        self.payload.event_type()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events always serialize")
    }
}

#[derive(Serialize, Deserialize)]
struct RawEvent {
    event_type: EventType,
    session_id: Option<String>,
    worker_id: String,
    setting: Option<ExperimentSetting>,
    timestamp_ms: u64,
    payload: serde_json::Value,
}

impl TryFrom<RawEvent> for Event {
    type Error = serde_json::Error;

    fn try_from(raw: RawEvent) -> Result<Self, Self::Error> {
        use serde_json::from_value as v;
        let payload = match raw.event_type {
            EventType::SessionStarted => Payload::SessionStarted(v(raw.payload)?),
            EventType::PromptServed => Payload::PromptServed(v(raw.payload)?),
            EventType::ExampleSubmitted => Payload::ExampleSubmitted(v(raw.payload)?),
            EventType::ValidationAssigned => Payload::ValidationAssigned(v(raw.payload)?),
            EventType::VoteCast => Payload::VoteCast(v(raw.payload)?),
            EventType::ValidationResolved => Payload::ValidationResolved(v(raw.payload)?),
            EventType::BonusAccrued => Payload::BonusAccrued(v(raw.payload)?),
        };
        Ok(Event {
            session_id: raw.session_id,
            worker_id: raw.worker_id,
            setting: raw.setting,
            timestamp_ms: raw.timestamp_ms,
            payload,
        })
    }
}

impl From<Event> for RawEvent {
    fn from(e: Event) -> Self {
        use serde_json::to_value as v;
        let event_type = e.event_type();
        let payload = match e.payload {
            Payload::SessionStarted(p) => v(p),
            Payload::PromptServed(p) => v(p),
            Payload::ExampleSubmitted(p) => v(p),
            Payload::ValidationAssigned(p) => v(p),
            Payload::VoteCast(p) => v(p),
            Payload::ValidationResolved(p) => v(p),
            Payload::BonusAccrued(p) => v(p),
        }
        .expect("payloads always serialize");
        RawEvent {
            event_type,
            session_id: e.session_id,
            worker_id: e.worker_id,
            setting: e.setting,
            timestamp_ms: e.timestamp_ms,
            payload,
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o error on event log: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed event on line {line}: {message}")]
    Malformed { line: usize, message: String },
}

pub fn to_jsonl(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<Event>, LogError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| LogError::Malformed { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

/// Reads a log file; a missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<Event>, LogError> {
    match File::open(path) {
        Ok(f) => parse_jsonl(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

/// Where accepted events go. `append` returning `Ok` means the event is
/// durable as far as this sink can promise.
pub trait EventSink: Send {
    fn append(&mut self, event: &Event) -> std::io::Result<()>;
}

/// In-memory sink; clones share the same buffer.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    events: Arc<Mutex<Vec<Event>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().unwrap().clone()
    }
}

impl EventSink for MemorySink {
    fn append(&mut self, event: &Event) -> std::io::Result<()> {
        self.events.lock().unwrap().push(event.clone());
        Ok(())
    }
}

/// Appends one line per event and flushes it before returning. With `sync`
/// set, also fsyncs.
#[derive(Debug)]
pub struct FileSink {
    file: File,
    sync: bool,
}

impl FileSink {
    pub fn open(path: &Path, sync: bool) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(FileSink { file, sync })
    }
}

impl EventSink for FileSink {
    fn append(&mut self, event: &Event) -> std::io::Result<()> {
        let mut line = event.to_line();
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Writer,
    Validator,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("event {index} ({event_type:?}) cannot be applied: {message}")]
pub struct ApplyError {
    pub index: u64,
    pub event_type: EventType,
    pub message: String,
}

/// Everything the platform knows, derived only from events.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection {
    pub sessions: BTreeMap<String, AnnotationSession>,
    pub active_sessions: BTreeMap<String, String>,
    pub worker_settings: BTreeMap<String, ExperimentSetting>,
    pub roles: BTreeMap<String, Role>,
    pub assigner: PassageAssigner,
    pub examples: BTreeMap<String, ExampleRecord>,
    /// Example ids in submission order.
    pub example_order: Vec<String>,
    pub tasks: BTreeMap<String, ValidationTask>,
    pub bonus: BonusLedger,
    pub idempotency: BTreeMap<String, String>,
    pub prompts_served: BTreeMap<String, u64>,
    pub event_count: u64,
    pub last_timestamp_ms: u64,
}

impl Projection {
    pub fn new(bonus_amount: f64) -> Self {
        Projection {
            sessions: BTreeMap::new(),
            active_sessions: BTreeMap::new(),
            worker_settings: BTreeMap::new(),
            roles: BTreeMap::new(),
            assigner: PassageAssigner::new(),
            examples: BTreeMap::new(),
            example_order: Vec::new(),
            tasks: BTreeMap::new(),
            bonus: BonusLedger::new(bonus_amount),
            idempotency: BTreeMap::new(),
            prompts_served: BTreeMap::new(),
            event_count: 0,
            last_timestamp_ms: 0,
        }
    }

    pub fn replay<'a>(bonus_amount: f64, events: impl IntoIterator<Item = &'a Event>) -> Result<Self, ApplyError> {
        let mut p = Projection::new(bonus_amount);
        for e in events {
            p.apply(e)?;
        }
        Ok(p)
    }

    /// Records in submission order.
    pub fn records(&self) -> impl Iterator<Item = &ExampleRecord> + Clone {
        self.example_order.iter().map(|id| &self.examples[id])
    }

    pub fn submit_key(session_id: &str, key: &str) -> String {
        format!("submit:{session_id}:{key}")
    }

    pub fn vote_key(task_id: &str, validator: &str, key: &str) -> String {
        format!("vote:{task_id}:{validator}:{key}")
    }

    pub fn apply(&mut self, e: &Event) -> Result<(), ApplyError> {
        let index = self.event_count;
        let fail = |message: String| ApplyError { index, event_type: e.event_type(), message };
        let session_id = || e.session_id.clone().ok_or_else(|| fail("missing session id".into()));
        match &e.payload {
            Payload::SessionStarted(p) => {
                let sid = session_id()?;
                let setting = e.setting.ok_or_else(|| fail("missing setting".into()))?;
                if self.sessions.contains_key(&sid) {
                    return Err(fail(format!("session `{sid}` already exists")));
                }
                if self.roles.get(&e.worker_id) == Some(&Role::Validator) {
                    return Err(fail(format!("`{}` is a validator", e.worker_id)));
                }
                self.sessions.insert(
                    sid.clone(),
                    AnnotationSession {
                        session_id: sid.clone(),
                        worker_id: e.worker_id.clone(),
                        setting,
                        passage_id: p.passage_id.clone(),
                        started_at_ms: e.timestamp_ms,
                        example_ids: Vec::new(),
                        activated_at_ms: e.timestamp_ms,
                        pending_queries: 0,
                        last_served: None,
                    },
                );
                self.active_sessions.insert(e.worker_id.clone(), sid);
                self.worker_settings.entry(e.worker_id.clone()).or_insert(setting);
                self.roles.insert(e.worker_id.clone(), Role::Writer);
                self.assigner.record(&e.worker_id, &p.passage_id);
            }
            Payload::PromptServed(p) => {
                let sid = session_id()?;
                let session = self.sessions.get_mut(&sid).ok_or_else(|| fail(format!("unknown session `{sid}`")))?;
                session.pending_queries += 1;
                session.last_served = Some(p.prompt.clone());
                *self.prompts_served.entry(sid).or_default() += 1;
            }
            Payload::ExampleSubmitted(p) => {
                let sid = session_id()?;
                let r = &p.record;
                let session = self.sessions.get_mut(&sid).ok_or_else(|| fail(format!("unknown session `{sid}`")))?;
                if session.is_complete() {
                    return Err(fail(format!("session `{sid}` is complete")));
                }
                if r.passage_id != session.passage_id || r.session_id != sid {
                    return Err(fail("record does not belong to the session".into()));
                }
                session.example_ids.push(r.example_id.clone());
                session.activated_at_ms = e.timestamp_ms;
                session.pending_queries = 0;
                session.last_served = None;
                if session.is_complete() {
                    self.active_sessions.remove(&e.worker_id);
                }
                if let Some(k) = &p.idempotency_key {
                    self.idempotency.insert(Self::submit_key(&sid, k), r.example_id.clone());
                }
                self.tasks.insert(r.example_id.clone(), ValidationTask::new(&r.example_id, &r.worker_id));
                self.example_order.push(r.example_id.clone());
                self.examples.insert(r.example_id.clone(), r.clone());
            }
            Payload::ValidationAssigned(p) => {
                if self.roles.get(&e.worker_id) == Some(&Role::Writer) {
                    return Err(fail(format!("`{}` is a writer", e.worker_id)));
                }
                let task = self.tasks.get_mut(&p.task_id).ok_or_else(|| fail(format!("unknown task `{}`", p.task_id)))?;
                if !task.has_open_slot() || !task.is_eligible(&e.worker_id) {
                    return Err(fail(format!("`{}` cannot be assigned", e.worker_id)));
                }
                task.assigned.push(e.worker_id.clone());
                self.roles.insert(e.worker_id.clone(), Role::Validator);
            }
            Payload::VoteCast(p) => {
                let task = self.tasks.get_mut(&p.task_id).ok_or_else(|| fail(format!("unknown task `{}`", p.task_id)))?;
                task.cast_vote(&e.worker_id, p.verdict).map_err(|err| fail(err.to_string()))?;
                if let Some(k) = &p.idempotency_key {
                    self.idempotency.insert(Self::vote_key(&p.task_id, &e.worker_id, k), p.task_id.clone());
                }
            }
            Payload::ValidationResolved(p) => {
                let task = self.tasks.get(&p.task_id).ok_or_else(|| fail(format!("unknown task `{}`", p.task_id)))?;
                if task.resolution != p.resolution || task.votes != p.votes {
                    return Err(fail("resolution disagrees with recorded votes".into()));
                }
                let record = self.examples.get_mut(&p.task_id).ok_or_else(|| fail("unknown example".into()))?;
                record.validity = p.resolution;
            }
            Payload::BonusAccrued(p) => {
                let record = self.examples.get(&p.example_id).ok_or_else(|| fail("unknown example".into()))?;
                if p.amount != self.bonus.amount {
                    return Err(fail(format!("bonus amount {} differs from configured {}", p.amount, self.bonus.amount)));
                }
                match self.bonus.accrue(record) {
                    Accrual::Accrued => {}
                    other => return Err(fail(format!("bonus not accruable: {other:?}"))),
                }
            }
        }
        self.event_count += 1;
        self.last_timestamp_ms = self.last_timestamp_ms.max(e.timestamp_ms);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::setting::CollectionMode;

    fn started(sid: &str, worker: &str, ts: u64) -> Event {
        Event {
            session_id: Some(sid.into()),
            worker_id: worker.into(),
            setting: Some(ExperimentSetting::baseline(CollectionMode::Standard)),
            timestamp_ms: ts,
            payload: Payload::SessionStarted(SessionStarted { passage_id: "p1".into() }),
        }
    }

    #[test]
    fn envelope_field_order() {
        let line = started("s0", "w", 7).to_line();
        assert_eq!(
            line,
            r#"{"event_type":"session_started","session_id":"s0","worker_id":"w","setting":{"collection_mode":"standard","gaa":null,"sampler":null,"answer_prompting":false},"timestamp_ms":7,"payload":{"passage_id":"p1"}}"#
        );
        let back: Event = serde_json::from_str(&line).unwrap();
        assert_eq!(back, started("s0", "w", 7));
    }

    #[test]
    fn payload_must_match_type() {
        let bad = r#"{"event_type":"vote_cast","session_id":null,"worker_id":"v","setting":null,"timestamp_ms":1,"payload":{"passage_id":"p1"}}"#;
        assert!(serde_json::from_str::<Event>(bad).is_err());
        assert!(matches!(parse_jsonl(format!("{bad}\n").as_bytes()), Err(LogError::Malformed { line: 1, .. })));
    }

    #[test]
    fn apply_rejects_duplicate_session_and_role_mixing() {
        let mut p = Projection::new(0.5);
        p.apply(&started("s0", "w", 1)).unwrap();
        assert!(p.apply(&started("s0", "w", 2)).is_err());
        let assign = Event {
            session_id: None,
            worker_id: "w".into(),
            setting: None,
            timestamp_ms: 3,
            payload: Payload::ValidationAssigned(ValidationAssigned { task_id: "x".into() }),
        };
        assert!(p.apply(&assign).is_err());
        assert_eq!(p.event_count, 1);
        assert_eq!(p.active_sessions["w"], "s0");
    }

    #[test]
    fn file_sink_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log/events.jsonl");
        assert!(read_log(&path).unwrap().is_empty());
        let events = vec![started("s0", "a", 1), started("s1", "b", 2)];
        {
            let mut sink = FileSink::open(&path, true).unwrap();
            for e in &events {
                sink.append(e).unwrap();
            }
        }
        assert_eq!(read_log(&path).unwrap(), events);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), to_jsonl(&events));
    }
}
