//! Three-way validation, majority resolution and worker quality.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::Validity;

pub const VOTES_PER_TASK: usize = 3;
pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("no eligible validator left for task `{task_id}`")]
    Starved { task_id: String },
    #[error("validator `{validator}` is not assigned to task `{task_id}`")]
    NotAssigned { task_id: String, validator: String },
    #[error("validator `{validator}` already voted on task `{task_id}`")]
    DoubleVote { task_id: String, validator: String },
    #[error("task `{task_id}` is already resolved")]
    AlreadyResolved { task_id: String },
    #[error("unknown validation task `{0}`")]
    UnknownTask(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub validator: String,
    pub verdict: Verdict,
}

/// Validation of one example. The task id is the example id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationTask {
    pub task_id: String,
    pub author: String,
    pub assigned: Vec<String>,
    pub votes: Vec<Vote>,
    pub resolution: Validity,
}

impl ValidationTask {
    pub fn new(task_id: impl Into<String>, author: impl Into<String>) -> Self {
        ValidationTask {
            task_id: task_id.into(),
            author: author.into(),
            assigned: Vec::new(),
            votes: Vec::new(),
            resolution: Validity::Pending,
        }
    }

    pub fn is_eligible(&self, validator: &str) -> bool {
        validator != self.author
            && !self.assigned.iter().any(|v| v == validator)
            && !self.votes.iter().any(|v| v.validator == validator)
    }

    pub fn has_open_slot(&self) -> bool {
        self.resolution == Validity::Pending && self.assigned.len() < VOTES_PER_TASK
    }

    /// Picks the first eligible validator from `pool` and records the
    /// assignment. Repeated calls never return the same validator twice.
    pub fn assign<'p, S: AsRef<str>>(&mut self, pool: &'p [S]) -> Result<&'p str, ValidationError> {
        let starved = || ValidationError::Starved { task_id: self.task_id.clone() };
        if !self.has_open_slot() {
            return Err(starved());
        }
        let chosen = pool.iter().map(AsRef::as_ref).find(|v| self.is_eligible(v)).ok_or_else(starved)?;
        self.assigned.push(chosen.to_owned());
        Ok(chosen)
    }

    pub fn check_vote(&self, validator: &str) -> Result<(), ValidationError> {
        if self.votes.iter().any(|v| v.validator == validator) {
            return Err(ValidationError::DoubleVote {
                task_id: self.task_id.clone(),
                validator: validator.to_owned(),
            });
        }
        if self.resolution != Validity::Pending {
            return Err(ValidationError::AlreadyResolved { task_id: self.task_id.clone() });
        }
        if !self.assigned.iter().any(|v| v == validator) {
            return Err(ValidationError::NotAssigned {
                task_id: self.task_id.clone(),
                validator: validator.to_owned(),
            });
        }
        Ok(())
    }

    /// Records a vote; the third vote resolves the task by majority.
    pub fn cast_vote(&mut self, validator: &str, verdict: Verdict) -> Result<Validity, ValidationError> {
        self.check_vote(validator)?;
        self.votes.push(Vote { validator: validator.to_owned(), verdict });
        if self.votes.len() == VOTES_PER_TASK {
            self.resolution = resolve(self.votes.iter().map(|v| v.verdict));
        }
        Ok(self.resolution)
    }
}

/// Majority verdict over any number of votes; ties resolve invalid.
pub fn resolve(verdicts: impl IntoIterator<Item = Verdict>) -> Validity {
    let (mut valid, mut invalid) = (0usize, 0usize);
    for v in verdicts {
        match v {
            Verdict::Valid => valid += 1,
            Verdict::Invalid => invalid += 1,
        }
    }
    if valid > invalid {
        Validity::Valid
    } else {
        Validity::Invalid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityRule {
    /// Flag when the incorrectness rate exceeds the threshold.
    IncorrectAbove,
    /// Flag when the validity rate falls below the threshold.
    ValidBelow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityPolicy {
    pub threshold: f64,
    pub rule: QualityRule,
}

impl Default for QualityPolicy {
    fn default() -> Self {
        QualityPolicy { threshold: DEFAULT_QUALITY_THRESHOLD, rule: QualityRule::IncorrectAbove }
    }
}

impl QualityPolicy {
    pub fn flags_rate(&self, incorrectness: f64) -> bool {
        match self.rule {
            QualityRule::IncorrectAbove => incorrectness > self.threshold,
            QualityRule::ValidBelow => 1.0 - incorrectness < self.threshold,
        }
    }

    /// Undefined quality (no resolved examples) never flags.
    pub fn flags(&self, quality: Option<f64>) -> bool {
        quality.is_some_and(|q| self.flags_rate(q))
    }
}

/// Share of `worker`'s resolved examples that were judged invalid; `None`
/// when nothing has been resolved yet.
pub fn worker_quality<'a>(tasks: impl IntoIterator<Item = &'a ValidationTask>, worker: &str) -> Option<f64> {
    let (mut resolved, mut invalid) = (0usize, 0usize);
    for t in tasks.into_iter().filter(|t| t.author == worker) {
        match t.resolution {
            Validity::Pending => {}
            Validity::Valid => resolved += 1,
            Validity::Invalid => {
                resolved += 1;
                invalid += 1;
            }
        }
    }
    (resolved > 0).then(|| invalid as f64 / resolved as f64)
}

pub fn flagged_workers<'a>(
    tasks: impl IntoIterator<Item = &'a ValidationTask> + Clone,
    policy: &QualityPolicy,
) -> BTreeSet<String> {
    let authors: BTreeSet<&str> = tasks.clone().into_iter().map(|t| t.author.as_str()).collect();
    authors
        .into_iter()
        .filter(|w| policy.flags(worker_quality(tasks.clone(), w)))
        .map(str::to_owned)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_examples() {
        let pool = ["v1", "v2", "v3"];
        let mut t = ValidationTask::new("e1", "a");
        let got: BTreeSet<_> = (0..3).map(|_| t.assign(&pool).unwrap().to_owned()).collect();
        assert_eq!(got.len(), 3);
        assert!(matches!(t.assign(&pool), Err(ValidationError::Starved { .. })));

        let mut t = ValidationTask::new("e2", "a");
        assert!(matches!(t.assign(&["a"]), Err(ValidationError::Starved { .. })));

        let mut t = ValidationTask::new("e3", "a");
        assert_eq!(t.assign(&pool).unwrap(), "v1");
        t.cast_vote("v1", Verdict::Valid).unwrap();
        assert_eq!(t.assign(&pool).unwrap(), "v2");
    }

    #[test]
    fn vote_examples() {
        let mut t = ValidationTask::new("e", "a");
        for _ in 0..3 {
            t.assign(&["v1", "v2", "v3"]).unwrap();
        }
        t.cast_vote("v1", Verdict::Valid).unwrap();
        t.cast_vote("v2", Verdict::Valid).unwrap();
        assert_eq!(t.resolution, Validity::Pending);
        assert_eq!(t.cast_vote("v3", Verdict::Invalid).unwrap(), Validity::Valid);

        assert_eq!(resolve([Verdict::Invalid, Verdict::Invalid, Verdict::Valid]), Validity::Invalid);

        let mut t = ValidationTask::new("e", "a");
        t.assign(&["v1"]).unwrap();
        assert!(matches!(t.cast_vote("v9", Verdict::Valid), Err(ValidationError::NotAssigned { .. })));
        t.cast_vote("v1", Verdict::Valid).unwrap();
        assert!(matches!(t.cast_vote("v1", Verdict::Valid), Err(ValidationError::DoubleVote { .. })));
    }

    fn resolved(author: &str, invalid: usize, valid: usize) -> Vec<ValidationTask> {
        (0..invalid + valid)
            .map(|i| {
                let mut t = ValidationTask::new(format!("{author}{i}"), author);
                t.resolution = if i < invalid { Validity::Invalid } else { Validity::Valid };
                t
            })
            .collect()
    }

    #[test]
    fn quality_examples() {
        let policy = QualityPolicy::default();
        let q = worker_quality(&resolved("w", 19, 1), "w");
        assert_eq!(q, Some(0.95));
        assert!(!policy.flags(q));
        let q = worker_quality(&resolved("w", 20, 0), "w");
        assert_eq!(q, Some(1.0));
        assert!(policy.flags(q));
        assert_eq!(worker_quality(&[ValidationTask::new("e", "w")], "w"), None);
        assert!(!policy.flags(None));
        assert!(!policy.flags_rate(0.95));
        assert!(policy.flags_rate(0.951));
    }

    #[test]
    fn strict_reading_flags_more() {
        let strict = QualityPolicy { threshold: 0.95, rule: QualityRule::ValidBelow };
        assert!(strict.flags_rate(0.5));
        assert!(!strict.flags_rate(0.0));
        let tasks = [resolved("a", 1, 1), resolved("b", 0, 4)].concat();
        assert_eq!(flagged_workers(&tasks, &strict), BTreeSet::from(["a".to_owned()]));
        assert!(flagged_workers(&tasks, &QualityPolicy::default()).is_empty());
    }
}
