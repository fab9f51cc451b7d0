//! Annotation sessions, example records, fooling and bonus accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{AnswerSpan, QaPrediction};
use crate::prompt::ScoredPrompt;
use crate::setting::ExperimentSetting;
use crate::text::max_f1_over_golds;

pub const EXAMPLES_PER_SESSION: usize = 5;
pub const DEFAULT_FOOLING_THRESHOLD: f64 = 0.4;
pub const DEFAULT_BONUS: f64 = 0.50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Pending,
    Valid,
    Invalid,
}

/// How a submitted question relates to the prompts the annotator saw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptProvenance {
    Unassisted,
    Accepted { source_prompt_id: String },
    Edited { source_prompt_id: String },
}

impl PromptProvenance {
    /// Exact match of question and answer against the last served prompt is
    /// an acceptance; any difference is an edit.
    pub fn determine(question: &str, answer: &AnswerSpan, last_served: Option<&ScoredPrompt>) -> Self {
        match last_served {
            None => PromptProvenance::Unassisted,
            Some(p) if p.question == question && p.answer == *answer => {
                PromptProvenance::Accepted { source_prompt_id: p.id.clone() }
            }
            Some(p) => PromptProvenance::Edited { source_prompt_id: p.id.clone() },
        }
    }

    pub fn source_prompt_id(&self) -> Option<&str> {
        match self {
            PromptProvenance::Unassisted => None,
            PromptProvenance::Accepted { source_prompt_id }
            | PromptProvenance::Edited { source_prompt_id } => Some(source_prompt_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example_id: String,
    pub session_id: String,
    pub worker_id: String,
    pub passage_id: String,
    pub setting: ExperimentSetting,
    pub question: String,
    pub answer: AnswerSpan,
    pub duration_ms: u64,
    pub generator_queries: u32,
    pub prompt_provenance: PromptProvenance,
    pub model_prediction: Option<QaPrediction>,
    pub fooled: Option<bool>,
    pub validity: Validity,
}

impl ExampleRecord {
    pub fn is_vmfe(&self) -> bool {
        self.fooled == Some(true) && self.validity == Validity::Valid
    }
}

/// Fooled iff the prediction's F1 against the gold is strictly below `theta`.
pub fn compute_fooled(prediction: &QaPrediction, gold: &AnswerSpan, theta: f64) -> bool {
    let f1 = max_f1_over_golds(&prediction.span.text, &[gold.text.as_str()])
        .expect("one gold is always supplied");
    f1.value < theta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub session_id: String,
    pub worker_id: String,
    pub setting: ExperimentSetting,
    pub passage_id: String,
    pub started_at_ms: u64,
    pub example_ids: Vec<String>,
    /// When the example currently being written was activated.
    pub activated_at_ms: u64,
    /// Prompts served for the example currently being written.
    pub pending_queries: u32,
    pub last_served: Option<ScoredPrompt>,
}

impl AnnotationSession {
    pub fn is_complete(&self) -> bool {
        self.example_ids.len() >= EXAMPLES_PER_SESSION
    }

    pub fn next_example_id(&self) -> String {
        format!("{}-e{}", self.session_id, self.example_ids.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonusEntry {
    pub worker_id: String,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Accrual {
    Accrued,
    AlreadyAccrued,
    NotQualifying(&'static str),
}

/// Bonus entries keyed by example id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonusLedger {
    pub amount: f64,
    pub entries: BTreeMap<String, BonusEntry>,
}

impl Default for BonusLedger {
    fn default() -> Self {
        BonusLedger::new(DEFAULT_BONUS)
    }
}

impl BonusLedger {
    pub fn new(amount: f64) -> Self {
        BonusLedger { amount, entries: BTreeMap::new() }
    }

    pub fn check(&self, example: &ExampleRecord) -> Accrual {
        if example.fooled != Some(true) {
            Accrual::NotQualifying("example did not fool the model")
        } else if example.validity != Validity::Valid {
            Accrual::NotQualifying("example is not validated as valid")
        } else if self.entries.contains_key(&example.example_id) {
            Accrual::AlreadyAccrued
        } else {
            Accrual::Accrued
        }
    }

    pub fn accrue(&mut self, example: &ExampleRecord) -> Accrual {
        let outcome = self.check(example);
        if outcome == Accrual::Accrued {
            self.entries.insert(
                example.example_id.clone(),
                BonusEntry { worker_id: example.worker_id.clone(), amount: self.amount },
            );
        }
        outcome
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.amount * self.entries.len() as f64
    }

    pub fn total_for(&self, worker: &str) -> f64 {
        self.amount * self.entries.values().filter(|e| e.worker_id == worker).count() as f64
    }
}
