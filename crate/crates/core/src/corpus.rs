//! Passage ingestion, filtering and per-worker assignment.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::PreconditionError;
use crate::seed;
use crate::text::{ngrams, normalize};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate passage id `{id}`")]
    DuplicateId { id: String },
    #[error("malformed passage record on line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("no unseen passages left for worker `{worker}`")]
    Exhausted { worker: String },
    #[error("unknown passage `{0}`")]
    UnknownPassage(String),
    #[error(transparent)]
    Precondition(#[from] PreconditionError),
    #[error("i/o error reading passages: {0}")]
    Io(#[from] std::io::Error),
}

/// One line of the newline-delimited ingestion format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub id: String,
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub tasks: Vec<String>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub page_title: String,
    pub text: String,
    /// Number of normalized tokens.
    pub token_count: usize,
    pub tasks: Vec<String>,
    /// Passed through verbatim from ingestion.
    pub provenance: serde_json::Value,
}

impl Passage {
    pub fn task_usage_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn to_record(&self) -> PassageRecord {
        PassageRecord {
            id: self.id.clone(),
            title: self.page_title.clone(),
            text: self.text.clone(),
            tasks: self.tasks.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

impl From<PassageRecord> for Passage {
    fn from(r: PassageRecord) -> Self {
        let token_count = normalize(&r.text).len();
        Passage {
            id: r.id,
            page_title: r.title,
            text: r.text,
            token_count,
            tasks: r.tasks,
            provenance: r.provenance,
        }
    }
}

/// Insertion-ordered passages with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassageStore {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl PassageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_passages(passages: impl IntoIterator<Item = Passage>) -> Result<Self, CorpusError> {
        let mut store = PassageStore::new();
        for p in passages {
            store.insert(p)?;
        }
        Ok(store)
    }

    /// Reads newline-delimited JSON records. Blank lines are skipped.
    ///
    /// A duplicate id inside the stream is an error. Re-ingesting a record
    /// that is already stored unchanged is a no-op.
    pub fn ingest<R: BufRead>(&mut self, reader: R) -> Result<usize, CorpusError> {
        let mut seen_in_stream = HashSet::new();
        let mut added = 0;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: PassageRecord = serde_json::from_str(&line)
                .map_err(|e| CorpusError::Malformed { line: idx + 1, message: e.to_string() })?;
            if !seen_in_stream.insert(record.id.clone()) {
                return Err(CorpusError::DuplicateId { id: record.id });
            }
            let passage = Passage::from(record);
            if let Some(existing) = self.get(&passage.id) {
                if *existing == passage {
                    continue;
                }
                return Err(CorpusError::DuplicateId { id: passage.id });
            }
            self.insert(passage)?;
            added += 1;
        }
        Ok(added)
    }

    pub fn insert(&mut self, passage: Passage) -> Result<(), CorpusError> {
        if self.by_id.contains_key(&passage.id) {
            return Err(CorpusError::DuplicateId { id: passage.id });
        }
        self.by_id.insert(passage.id.clone(), self.passages.len());
        self.passages.push(passage);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter()
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.passages {
            out.push_str(&serde_json::to_string(&p.to_record()).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Normalized n-grams drawn from texts that passages must not overlap.
#[derive(Debug, Clone, Default)]
pub struct ExclusionIndex {
    n: usize,
    grams: HashSet<Vec<String>>,
}

impl ExclusionIndex {
    pub fn build<S: AsRef<str>>(texts: &[S], n: usize) -> Result<Self, PreconditionError> {
        if n == 0 {
            return Err(PreconditionError::new("exclusion n-gram length must be at least 1"));
        }
        let mut grams = HashSet::new();
        for text in texts {
            let norm = normalize(text.as_ref());
            for gram in ngrams(norm.tokens(), n)? {
                if !grams.contains(gram) {
                    grams.insert(gram.to_vec());
                }
            }
        }
        Ok(ExclusionIndex { n, grams })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn overlaps(&self, text: &str) -> bool {
        if self.grams.is_empty() {
            return false;
        }
        let norm = normalize(text);
        norm.tokens().windows(self.n).any(|w| self.grams.contains(w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_tasks: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams { min_tokens: 100, max_tokens: 600, min_tasks: 5 }
    }
}

/// Per-stage rejection counts. Stages run in order length, tasks, overlap;
/// a passage is counted against the first stage it fails.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub rejected_length: usize,
    pub rejected_tasks: usize,
    pub rejected_overlap: usize,
    pub kept: usize,
}

pub fn filter_passages(
    store: &PassageStore,
    params: FilterParams,
    exclusion: &ExclusionIndex,
) -> (PassageStore, FilterReport) {
    let mut report = FilterReport { input: store.len(), ..Default::default() };
    let mut kept = PassageStore::new();
    for p in store.iter() {
        if p.token_count < params.min_tokens || p.token_count > params.max_tokens {
            report.rejected_length += 1;
        } else if p.task_usage_count() < params.min_tasks {
            report.rejected_tasks += 1;
        } else if exclusion.overlaps(&p.text) {
            report.rejected_overlap += 1;
        } else {
            kept.insert(p.clone()).expect("ids already unique");
        }
    }
    report.kept = kept.len();
    (kept, report)
}

/// Tracks which passages each worker has already been given.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageAssigner {
    served: BTreeMap<String, BTreeSet<String>>,
}

impl PassageAssigner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uniform choice over the passages `worker` has not seen. The draw is
    /// keyed on (seed, worker, number already served), so the sequence is
    /// reproducible. Nothing is recorded.
    pub fn draw<'s>(&self, store: &'s PassageStore, worker: &str, seed: u64) -> Result<&'s Passage, CorpusError> {
        let seen = self.served.get(worker);
        let unseen: Vec<&Passage> =
            store.iter().filter(|p| seen.is_none_or(|s| !s.contains(&p.id))).collect();
        if unseen.is_empty() {
            return Err(CorpusError::Exhausted { worker: worker.to_owned() });
        }
        let served_count = seen.map_or(0, BTreeSet::len).to_string();
        let mut rng = seed::rng(seed, &["assign_passage", worker, &served_count]);
        Ok(unseen[rng.random_range(0..unseen.len())])
    }

    /// Draws and records.
    pub fn assign<'s>(
        &mut self,
        store: &'s PassageStore,
        worker: &str,
        seed: u64,
    ) -> Result<&'s Passage, CorpusError> {
        let chosen = self.draw(store, worker, seed)?;
        self.record(worker, &chosen.id);
        Ok(chosen)
    }

    /// Marks a passage as served without drawing (used on replay).
    pub fn record(&mut self, worker: &str, passage_id: &str) {
        self.served.entry(worker.to_owned()).or_default().insert(passage_id.to_owned());
    }

    pub fn served_to(&self, worker: &str) -> impl Iterator<Item = &String> {
        self.served.get(worker).into_iter().flatten()
    }
}
