use std::path::{Path, PathBuf};
use std::time::Duration;

use gaa_core::platform::PlatformConfig;
use gaa_core::prompt::PromptParams;
use gaa_core::setting::{setting_matrix, ExperimentSetting, GaaSource};
use gaa_core::validation::{QualityPolicy, QualityRule};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::http_backend::ClientOptions;

/// Prefix of environment overrides: `GAA_TOP_P` overrides `top_p`.
pub const ENV_PREFIX: &str = "GAA_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid value in {var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Holds `events.jsonl` and the prewarmed `caches/<source>.jsonl`.
    pub storage_dir: PathBuf,
    /// Passage JSONL, one `{"id", "title", "text"}` record per line.
    pub corpus_path: PathBuf,
    pub squad_generator_url: Option<String>,
    pub adversarial_qa_generator_url: Option<String>,
    pub combined_generator_url: Option<String>,
    pub qa_url: Option<String>,
    pub candidates_url: Option<String>,
    pub seed: u64,
    pub fooling_threshold: f64,
    pub quality_threshold: f64,
    pub quality_rule: QualityRule,
    pub bonus_amount: f64,
    pub cache_depth: usize,
    pub top_p: f64,
    /// Setting labels workers may be placed in; empty means all twenty.
    pub settings: Vec<String>,
    pub target_examples_per_setting: usize,
    pub max_in_flight: usize,
    pub request_timeout_ms: u64,
    pub retries: u32,
    /// fsync every appended event.
    pub fsync: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let platform = PlatformConfig::default();
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            storage_dir: PathBuf::from("data"),
            corpus_path: PathBuf::from("passages.jsonl"),
            squad_generator_url: None,
            adversarial_qa_generator_url: None,
            combined_generator_url: None,
            qa_url: None,
            candidates_url: None,
            seed: platform.seed,
            fooling_threshold: platform.fooling_threshold,
            quality_threshold: platform.quality.threshold,
            quality_rule: platform.quality.rule,
            bonus_amount: platform.bonus_amount,
            cache_depth: platform.prompt.depth,
            top_p: platform.prompt.top_p,
            settings: Vec::new(),
            target_examples_per_setting: 1000,
            max_in_flight: 8,
            request_timeout_ms: 30_000,
            retries: 2,
            fsync: true,
        }
    }
}

impl ServiceConfig {
    /// Reads a JSON file, then applies `GAA_*` variables from the process
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_owned(), source })?;
                serde_json::from_str(&text)?
            }
            None => ServiceConfig::default(),
        };
        let cfg = base.with_overrides(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides fields from `(name, value)` pairs. Values are read as JSON
    /// first, falling back to a bare string.
    pub fn with_overrides(
        &self,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let Value::Object(mut fields) = serde_json::to_value(self)? else { unreachable!("config is a struct") };
        for (var, raw) in vars {
            let Some(name) = var.strip_prefix(ENV_PREFIX) else { continue };
            let key = name.to_ascii_lowercase();
            let Some(current) = fields.get(&key) else { continue };
            let value = match current {
                Value::String(_) => Value::String(raw),
                _ => serde_json::from_str(&raw).unwrap_or(Value::String(raw)),
            };
            // check one field at a time so the error names the variable
            let mut probe = fields.clone();
            probe.insert(key.clone(), value.clone());
            serde_json::from_value::<ServiceConfig>(Value::Object(probe))
                .map_err(|e| ConfigError::Env { var: var.clone(), message: e.to_string() })?;
            fields.insert(key, value);
        }
        Ok(serde_json::from_value(Value::Object(fields))?)
    }

    pub fn experiment_settings(&self) -> Result<Vec<ExperimentSetting>, ConfigError> {
        if self.settings.is_empty() {
            return Ok(setting_matrix());
        }
        self.settings.iter().map(|s| s.parse().map_err(|e| ConfigError::Invalid(format!("{e}")))).collect()
    }

    pub fn generator_url(&self, gaa: GaaSource) -> Option<&str> {
        match gaa {
            GaaSource::Squad => self.squad_generator_url.as_deref(),
            GaaSource::AdversarialQa => self.adversarial_qa_generator_url.as_deref(),
            GaaSource::Combined => self.combined_generator_url.as_deref(),
        }
    }

    pub fn platform_config(&self) -> Result<PlatformConfig, ConfigError> {
        let cfg = PlatformConfig {
            seed: self.seed,
            fooling_threshold: self.fooling_threshold,
            quality: QualityPolicy { threshold: self.quality_threshold, rule: self.quality_rule },
            bonus_amount: self.bonus_amount,
            prompt: PromptParams { depth: self.cache_depth, top_p: self.top_p },
            id_prefix: String::new(),
            settings: self.experiment_settings()?,
            target_examples_per_setting: self.target_examples_per_setting,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.0))?;
        Ok(cfg)
    }

    pub fn client_options(&self) -> ClientOptions {
        ClientOptions {
            timeout: Duration::from_millis(self.request_timeout_ms),
            retries: self.retries,
            max_in_flight: self.max_in_flight,
            ..ClientOptions::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let settings = self.experiment_settings()?;
        self.platform_config()?;
        for gaa in GaaSource::ALL {
            if settings.iter().any(|s| s.gaa == Some(gaa)) && self.generator_url(gaa).is_none() {
                return Err(ConfigError::Invalid(format!("{}_generator_url is required by the settings", gaa.as_str())));
            }
        }
        let needs_qa = settings.iter().any(|s| s.is_adversarial() || s.gaa.is_some());
        if needs_qa && self.qa_url.is_none() {
            return Err(ConfigError::Invalid("qa_url is required by the settings".into()));
        }
        if settings.iter().any(|s| s.gaa.is_some()) && self.candidates_url.is_none() {
            return Err(ConfigError::Invalid("candidates_url is required by the settings".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::Invalid("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn events_path(&self) -> PathBuf {
        self.storage_dir.join("events.jsonl")
    }

    pub fn cache_path(&self, gaa: GaaSource) -> PathBuf {
        self.storage_dir.join("caches").join(format!("{}.jsonl", gaa.as_str()))
    }
}
