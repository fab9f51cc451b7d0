//! Collection metrics per setting, the text report, and dataset export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{ExampleRecord, PromptProvenance, Validity};
use crate::backend::AnswerSpan;
use crate::corpus::PassageStore;
use crate::error::PreconditionError;
use crate::setting::ExperimentSetting;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error(transparent)]
    Precondition(#[from] PreconditionError),
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Median and median absolute deviation.
pub fn median_and_mad(values: &[f64]) -> Result<(f64, f64), PreconditionError> {
    if values.is_empty() {
        return Err(PreconditionError::new("median of an empty list"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = median_sorted(&sorted);
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - median).abs()).collect();
    dev.sort_by(f64::total_cmp);
    Ok((median, median_sorted(&dev)))
}

pub fn vmfe_count(records: &[&ExampleRecord]) -> usize {
    records.iter().filter(|r| r.is_vmfe()).count()
}

/// Share of records that fooled the model and were validated.
pub fn vmer(records: &[&ExampleRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Undefined("no records"));
    }
    Ok(vmfe_count(records) as f64 / records.len() as f64)
}

fn total_ms(records: &[&ExampleRecord]) -> u64 {
    records.iter().map(|r| r.duration_ms).sum()
}

/// Total time across all records divided by the number of validated
/// model-fooling examples, in seconds.
pub fn time_per_vmfe(records: &[&ExampleRecord]) -> Result<f64, MetricsError> {
    let count = vmfe_count(records);
    if count == 0 {
        return Err(MetricsError::Undefined("no validated model-fooling examples"));
    }
    Ok(total_ms(records) as f64 / 1000.0 / count as f64)
}

/// Median duration of the validated model-fooling examples, in seconds.
pub fn median_time_of_vmfe(records: &[&ExampleRecord]) -> Result<f64, MetricsError> {
    let d: Vec<f64> = records.iter().filter(|r| r.is_vmfe()).map(|r| r.duration_ms as f64 / 1000.0).collect();
    if d.is_empty() {
        return Err(MetricsError::Undefined("no validated model-fooling examples"));
    }
    Ok(median_and_mad(&d)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    GaaTraining,
    Sampler,
    AnswerPrompting,
}

impl GroupBy {
    pub const ALL: [GroupBy; 3] = [GroupBy::GaaTraining, GroupBy::Sampler, GroupBy::AnswerPrompting];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupBy::GaaTraining => "gaa_training",
            GroupBy::Sampler => "sampler",
            GroupBy::AnswerPrompting => "answer_prompting",
        }
    }

    /// `None` for settings without an assistant.
    pub fn group_of(self, setting: &ExperimentSetting) -> Option<String> {
        Some(match self {
            GroupBy::GaaTraining => setting.gaa?.as_str().to_owned(),
            GroupBy::Sampler => setting.sampler?.as_str().to_owned(),
            GroupBy::AnswerPrompting => {
                setting.gaa?;
                setting.answer_prompting.to_string()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationsRow {
    pub group: String,
    pub n_examples: usize,
    pub avg_generations: f64,
}

/// Mean generator queries per example within each group, over records from
/// assisted settings. Groups with no records do not appear.
pub fn generations_per_example(records: &[&ExampleRecord], group_by: GroupBy) -> Vec<GenerationsRow> {
    let mut groups: BTreeMap<String, (usize, u64)> = BTreeMap::new();
    for r in records {
        if let Some(g) = group_by.group_of(&r.setting) {
            let e = groups.entry(g).or_default();
            e.0 += 1;
            e.1 += u64::from(r.generator_queries);
        }
    }
    groups
        .into_iter()
        .map(|(group, (n, q))| GenerationsRow { group, n_examples: n, avg_generations: q as f64 / n as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: ExperimentSetting,
    /// Resolved records from non-flagged workers; every other field is
    /// computed over exactly these.
    pub n_examples: usize,
    pub n_pending: usize,
    pub n_excluded_flagged: usize,
    pub n_vmfe: usize,
    pub median_time_s: Option<f64>,
    pub time_mad_s: Option<f64>,
    /// `None` in standard collection, where nothing is tested against the
    /// model, and when there are no records.
    pub vmer: Option<f64>,
    pub time_per_vmfe_s: Option<f64>,
    pub median_time_per_vmfe_s: Option<f64>,
    pub avg_generations_per_example: Option<f64>,
}

/// Splits a setting's records into those that count, those still pending,
/// and those dropped because their author is flagged.
pub fn eligible_records<'a>(
    records: impl IntoIterator<Item = &'a ExampleRecord>,
    setting: &ExperimentSetting,
    flagged: &BTreeSet<String>,
) -> (Vec<&'a ExampleRecord>, usize, usize) {
    let (mut kept, mut pending, mut excluded) = (Vec::new(), 0, 0);
    for r in records.into_iter().filter(|r| r.setting == *setting) {
        if flagged.contains(&r.worker_id) {
            excluded += 1;
        } else if r.validity == Validity::Pending {
            pending += 1;
        } else {
            kept.push(r);
        }
    }
    (kept, pending, excluded)
}

pub fn compute_report<'a>(
    records: impl IntoIterator<Item = &'a ExampleRecord>,
    setting: &ExperimentSetting,
    flagged: &BTreeSet<String>,
) -> MetricsReport {
    let (kept, n_pending, n_excluded_flagged) = eligible_records(records, setting, flagged);
    let durations: Vec<f64> = kept.iter().map(|r| r.duration_ms as f64 / 1000.0).collect();
    let (median_time_s, time_mad_s) = match median_and_mad(&durations) {
        Ok((m, d)) => (Some(m), Some(d)),
        Err(_) => (None, None),
    };
    let adversarial = setting.is_adversarial();
    let avg_generations_per_example = (setting.gaa.is_some() && !kept.is_empty()).then(|| {
        kept.iter().map(|r| u64::from(r.generator_queries)).sum::<u64>() as f64 / kept.len() as f64
    });
    MetricsReport {
        setting: *setting,
        n_examples: kept.len(),
        n_pending,
        n_excluded_flagged,
        n_vmfe: vmfe_count(&kept),
        median_time_s,
        time_mad_s,
        vmer: if adversarial { vmer(&kept).ok() } else { None },
        time_per_vmfe_s: if adversarial { time_per_vmfe(&kept).ok() } else { None },
        median_time_per_vmfe_s: if adversarial { median_time_of_vmfe(&kept).ok() } else { None },
        avg_generations_per_example,
    }
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.decimals$}"))
}

/// Aligned plain-text table: setting, n, `t` with MAD subscript, vMER (%),
/// t/vMFE (s). Undefined cells print as `-`.
pub fn render_table(reports: &[MetricsReport], include_median_vmfe: bool) -> String {
    let mut header = vec!["Setting".to_owned(), "n".into(), "t (s)".into(), "vMER (%)".into(), "t/vMFE (s)".into()];
    if include_median_vmfe {
        header.push("median t of vMFE (s)".into());
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let t = match (r.median_time_s, r.time_mad_s) {
                (Some(m), Some(d)) => format!("{m:.1}_{{{d:.1}}}"),
                _ => "-".into(),
            };
            let mut row = vec![
                r.setting.label(),
                r.n_examples.to_string(),
                t,
                fmt_opt(r.vmer.map(|v| v * 100.0), 2),
                fmt_opt(r.time_per_vmfe_s, 1),
            ];
            if include_median_vmfe {
                row.push(fmt_opt(r.median_time_per_vmfe_s, 1));
            }
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                let _ = write!(s, "{c:<w$}", w = widths[i]);
            } else {
                let _ = write!(s, "{c:>w$}", w = widths[i]);
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&header, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&rule, &mut out);
    for r in &rows {
        line(r, &mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadAnswer {
    pub text: String,
    pub answer_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadQa {
    pub id: String,
    pub question: String,
    pub answers: Vec<SquadAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadParagraph {
    pub context: String,
    pub qas: Vec<SquadQa>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadArticle {
    pub title: String,
    pub paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadDataset {
    pub version: String,
    pub data: Vec<SquadArticle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageMeta {
    pub passage_id: String,
    pub title: String,
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub id: String,
    pub passage_id: String,
    pub worker_id: String,
    pub prompt_provenance: PromptProvenance,
    pub generator_queries: u32,
    pub fooled: Option<bool>,
}

/// Sidecar carrying what the SQuAD format has no room for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMetadata {
    pub setting: ExperimentSetting,
    pub passages: Vec<PassageMeta>,
    pub examples: Vec<ExampleMeta>,
}

/// Valid records of one setting as a SQuAD v1.1 document, one article per
/// passage in first-appearance order. Flagged workers are skipped.
pub fn export_dataset<'a>(
    records: impl IntoIterator<Item = &'a ExampleRecord>,
    setting: &ExperimentSetting,
    passages: &PassageStore,
    flagged: &BTreeSet<String>,
) -> Result<(SquadDataset, ExportMetadata), PreconditionError> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_passage: BTreeMap<&str, Vec<&ExampleRecord>> = BTreeMap::new();
    for r in records {
        if r.setting != *setting || r.validity != Validity::Valid || flagged.contains(&r.worker_id) {
            continue;
        }
        let entry = by_passage.entry(r.passage_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(&r.passage_id);
        }
        entry.push(r);
    }
    let mut data = Vec::new();
    let mut meta = ExportMetadata { setting: *setting, passages: Vec::new(), examples: Vec::new() };
    for pid in order {
        let passage = passages
            .get(pid)
            .ok_or_else(|| PreconditionError::new(format!("record references unknown passage `{pid}`")))?;
        let qas = by_passage[pid]
            .iter()
            .map(|r| {
                meta.examples.push(ExampleMeta {
                    id: r.example_id.clone(),
                    passage_id: r.passage_id.clone(),
                    worker_id: r.worker_id.clone(),
                    prompt_provenance: r.prompt_provenance.clone(),
                    generator_queries: r.generator_queries,
                    fooled: r.fooled,
                });
                SquadQa {
                    id: r.example_id.clone(),
                    question: r.question.clone(),
                    answers: vec![SquadAnswer { text: r.answer.text.clone(), answer_start: r.answer.char_start }],
                }
            })
            .collect();
        meta.passages.push(PassageMeta {
            passage_id: passage.id.clone(),
            title: passage.page_title.clone(),
            provenance: passage.provenance.clone(),
        });
        data.push(SquadArticle {
            title: passage.page_title.clone(),
            paragraphs: vec![SquadParagraph { context: passage.text.clone(), qas }],
        });
    }
    Ok((SquadDataset { version: "1.1".into(), data }, meta))
}

/// Flattens a SQuAD document back to (question, answer, context) triples.
pub fn dataset_triples(dataset: &SquadDataset) -> Vec<(String, AnswerSpan, String)> {
    let mut out = Vec::new();
    for article in &dataset.data {
        for para in &article.paragraphs {
            for qa in &para.qas {
                for a in &qa.answers {
                    out.push((qa.question.clone(), AnswerSpan::new(&a.text, a.answer_start), para.context.clone()));
                }
            }
        }
    }
    out
}
