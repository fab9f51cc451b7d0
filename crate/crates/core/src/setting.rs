//! Experiment settings and the twenty-cell matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{PromptMode, SamplingStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectionMode {
    Standard,
    Adversarial,
}

/// Which question source the assistant's generator was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaaSource {
    Squad,
    AdversarialQa,
    Combined,
}

impl GaaSource {
    pub const ALL: [GaaSource; 3] = [GaaSource::Squad, GaaSource::AdversarialQa, GaaSource::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            GaaSource::Squad => "squad",
            GaaSource::AdversarialQa => "adversarial_qa",
            GaaSource::Combined => "combined",
        }
    }
}

impl FromStr for GaaSource {
    type Err = SettingError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GaaSource::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| SettingError(format!("unknown generator source `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid experiment setting: {0}")]
pub struct SettingError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExperimentSetting {
    pub collection_mode: CollectionMode,
    pub gaa: Option<GaaSource>,
    pub sampler: Option<SamplingStrategy>,
    pub answer_prompting: bool,
}

impl ExperimentSetting {
    pub const fn baseline(mode: CollectionMode) -> Self {
        ExperimentSetting { collection_mode: mode, gaa: None, sampler: None, answer_prompting: false }
    }

    pub const fn assisted(
        mode: CollectionMode,
        gaa: GaaSource,
        sampler: SamplingStrategy,
        answer_prompting: bool,
    ) -> Self {
        ExperimentSetting { collection_mode: mode, gaa: Some(gaa), sampler: Some(sampler), answer_prompting }
    }

    /// Checks the combination is one of the twenty studied cells.
    pub fn validate(&self) -> Result<(), SettingError> {
        if self.gaa.is_some() != self.sampler.is_some() {
            return Err(SettingError("a sampler is configured exactly when a generator is".into()));
        }
        if self.collection_mode == CollectionMode::Standard
            && self.gaa.is_some_and(|g| g != GaaSource::Squad)
        {
            return Err(SettingError(
                "standard collection is only paired with the SQuAD-trained generator".into(),
            ));
        }
        if self.answer_prompting {
            if self.collection_mode != CollectionMode::Adversarial {
                return Err(SettingError("answer prompting requires adversarial collection".into()));
            }
            if !matches!(self.gaa, Some(GaaSource::AdversarialQa | GaaSource::Combined)) {
                return Err(SettingError(
                    "answer prompting requires an AdversarialQA or combined generator".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn is_adversarial(&self) -> bool {
        self.collection_mode == CollectionMode::Adversarial
    }

    pub fn prompt_mode(&self) -> PromptMode {
        if self.answer_prompting {
            PromptMode::AnswerAndQuestion
        } else {
            PromptMode::QuestionOnly
        }
    }

    /// Compact name, e.g. `adversarial+combined+uncertainty+answers`.
    pub fn label(&self) -> String {
        let mut s = match self.collection_mode {
            CollectionMode::Standard => "standard".to_owned(),
            CollectionMode::Adversarial => "adversarial".to_owned(),
        };
        if let Some(g) = self.gaa {
            s.push('+');
            s.push_str(g.as_str());
        }
        if let Some(sm) = self.sampler {
            s.push('+');
            s.push_str(sm.as_str());
        }
        if self.answer_prompting {
            s.push_str("+answers");
        }
        s
    }
}

impl fmt::Display for ExperimentSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ExperimentSetting {
    type Err = SettingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split('+');
        let collection_mode = match parts.next() {
            Some("standard") => CollectionMode::Standard,
            Some("adversarial") => CollectionMode::Adversarial,
            _ => return Err(SettingError(format!("unknown collection mode in `{s}`"))),
        };
        let mut setting = ExperimentSetting::baseline(collection_mode);
        if let Some(g) = parts.next() {
            setting.gaa = Some(g.parse()?);
            setting.sampler = Some(match parts.next() {
                Some("likelihood") => SamplingStrategy::Likelihood,
                Some("adversarial") => SamplingStrategy::Adversarial,
                Some("uncertainty") => SamplingStrategy::Uncertainty,
                _ => return Err(SettingError(format!("missing or unknown sampler in `{s}`"))),
            });
            match parts.next() {
                None => {}
                Some("answers") => setting.answer_prompting = true,
                Some(other) => return Err(SettingError(format!("unexpected `{other}` in `{s}`"))),
            }
        }
        if parts.next().is_some() {
            return Err(SettingError(format!("trailing components in `{s}`")));
        }
        setting.validate()?;
        Ok(setting)
    }
}

/// The matrix in table order: two baselines, standard collection with the
/// SQuAD-trained assistant, adversarial collection with each assistant, and
/// adversarial collection with answer prompting.
pub fn setting_matrix() -> Vec<ExperimentSetting> {
    use CollectionMode::*;
    let mut out = vec![ExperimentSetting::baseline(Standard), ExperimentSetting::baseline(Adversarial)];
    for s in SamplingStrategy::ALL {
        out.push(ExperimentSetting::assisted(Standard, GaaSource::Squad, s, false));
    }
    for g in GaaSource::ALL {
        for s in SamplingStrategy::ALL {
            out.push(ExperimentSetting::assisted(Adversarial, g, s, false));
        }
    }
    for g in [GaaSource::AdversarialQa, GaaSource::Combined] {
        for s in SamplingStrategy::ALL {
            out.push(ExperimentSetting::assisted(Adversarial, g, s, true));
        }
    }
    out
}
