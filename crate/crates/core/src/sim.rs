//! Simulated annotators and validators driving the platform through every
//! experiment setting.
//!
//! Each setting runs as an isolated cell with its own platform, clock and
//! mock backends, all seeded from the run seed. Cells share one corpus and
//! start from the same prewarmed caches. The combined event log is the
//! concatenation of the cell logs in matrix order, so the single-threaded and
//! concurrent modes produce identical output.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{ExampleRecord, Validity, EXAMPLES_PER_SESSION};
use crate::backend::mock::{heuristic_candidates, words, MockCandidates, MockGenerator, MockQa};
use crate::backend::{AnswerSpan, QuestionGenerator};
use crate::clock::{Clock, ManualClock};
use crate::corpus::{Passage, PassageRecord, PassageStore};
use crate::error::PreconditionError;
use crate::events::{Event, MemorySink};
use crate::metrics::{generations_per_example, render_table, GenerationsRow, GroupBy, MetricsReport};
use crate::platform::{Backends, Platform, PlatformConfig, PlatformError};
use crate::prompt::{prewarm, PromptCache, PromptParams, ScoredPrompt};
use crate::seed;
use crate::setting::{setting_matrix, ExperimentSetting, GaaSource};
use crate::text::normalize;
use crate::validation::Verdict;

/// Midnight UTC, 2021-01-01.
pub const SIM_EPOCH_MS: u64 = 1_609_459_200_000;
const DAY_MS: u64 = 86_400_000;
const MAX_QUERIES_PER_EXAMPLE: u32 = 10;
const SESSIONS_PER_WRITER: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorProfile {
    /// Chance of asking for a prompt, and of asking again after rejecting one.
    pub p_query: f64,
    /// Chance of taking a served prompt verbatim.
    pub p_accept: f64,
    /// Per-token chance of rewording when editing a prompt.
    pub edit_strength: f64,
    pub base_time_ms: u64,
    /// Time multiplier on acceptance; edits get half the saving.
    pub time_saving_factor: f64,
    /// Chance that a prompt the model cannot answer becomes a deliberate
    /// fooling attempt, scaled by `1 - adversary_f1`.
    pub skill_lift: f64,
    /// Chance the example is well formed; validators judge against this.
    pub p_well_formed: f64,
}

impl Default for AnnotatorProfile {
    fn default() -> Self {
        AnnotatorProfile {
            p_query: 0.55,
            p_accept: 0.6,
            edit_strength: 0.2,
            base_time_ms: 60_000,
            time_saving_factor: 0.8,
            skill_lift: 0.3,
            p_well_formed: 0.9,
        }
    }
}

impl AnnotatorProfile {
    pub fn validate(&self) -> Result<(), PreconditionError> {
        for (name, p) in [
            ("p_query", self.p_query),
            ("p_accept", self.p_accept),
            ("edit_strength", self.edit_strength),
            ("time_saving_factor", self.time_saving_factor),
            ("skill_lift", self.skill_lift),
            ("p_well_formed", self.p_well_formed),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PreconditionError::new(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.base_time_ms == 0 {
            return Err(PreconditionError::new("base_time_ms must be positive"));
        }
        Ok(())
    }

    /// Expected prompts per example: a first query with `p_query`, then one
    /// more after each rejection with `p_query` again (ignoring the cap).
    pub fn expected_queries(&self) -> f64 {
        let again = (1.0 - self.p_accept) * self.p_query;
        if again >= 1.0 {
            f64::INFINITY
        } else {
            self.p_query / (1.0 - again)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub examples_per_setting: usize,
    pub settings: Vec<ExperimentSetting>,
    /// Writers take profiles round-robin.
    pub profiles: Vec<AnnotatorProfile>,
    pub validators_per_setting: usize,
    pub validator_accuracy: f64,
    pub qa_skill: f64,
    pub passages: usize,
    pub platform: PlatformConfig,
    pub concurrent: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            examples_per_setting: 50,
            settings: setting_matrix(),
            profiles: vec![AnnotatorProfile::default()],
            validators_per_setting: 5,
            validator_accuracy: 0.9,
            qa_skill: 0.97,
            passages: 40,
            platform: PlatformConfig::default(),
            concurrent: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Precondition(#[from] PreconditionError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingFailure {
    pub setting: ExperimentSetting,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutput {
    pub events: Vec<Event>,
    pub reports: Vec<MetricsReport>,
    pub generations: BTreeMap<GroupBy, Vec<GenerationsRow>>,
    pub failures: Vec<SettingFailure>,
}

impl ExperimentOutput {
    pub fn table(&self) -> String {
        render_table(&self.reports, false)
    }

    pub fn events_jsonl(&self) -> String {
        crate::events::to_jsonl(&self.events)
    }
}

const FIRST: [&str; 16] = [
    "Marie", "Pierre", "Ada", "Alan", "Grace", "Niels", "Lise", "Enrico", "Rosalind", "Carl", "Emmy", "Srinivasa",
    "Dorothy", "Werner", "Chien", "Hedy",
];
const LAST: [&str; 16] = [
    "Curie", "Laurent", "Lovelace", "Turing", "Hopper", "Bohr", "Meitner", "Fermi", "Franklin", "Gauss", "Noether",
    "Ramanujan", "Hodgkin", "Heisenberg", "Wu", "Lamarr",
];
const PLACES: [&str; 12] = [
    "Paris", "Vienna", "Cambridge", "Copenhagen", "Rome", "Berlin", "Madras", "Oxford", "Zurich", "Lisbon", "Kyoto",
    "Boston",
];
const NOUNS: [&str; 12] = [
    "chemistry", "mathematics", "physics", "astronomy", "music", "engineering", "botany", "geology", "medicine",
    "poetry", "architecture", "navigation",
];
const ADJ: [&str; 8] = ["old", "famous", "small", "northern", "royal", "quiet", "large", "eastern"];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let name = format!("{} {}", FIRST.choose(rng).unwrap(), LAST.choose(rng).unwrap());
    let place = PLACES.choose(rng).unwrap();
    let year = rng.random_range(1700..2000);
    let noun = NOUNS.choose(rng).unwrap();
    let adj = ADJ.choose(rng).unwrap();
    let count = rng.random_range(2..40);
    match rng.random_range(0..6) {
        0 => format!("{name} was born in {place} in {year} and later taught {noun} there."),
        1 => format!("In {year} {name} moved to {place} to study {noun} with a group of {count} students."),
        2 => format!("The {adj} academy of {place} was founded by {name} in {year}."),
        3 => format!("{name} wrote {count} books about {noun} while living near the {adj} harbour."),
        4 => format!("Many people in {place} still remember the {adj} festival of {year}."),
        _ => format!("A {adj} library in {place} holds {count} letters that {name} sent about {noun}."),
    }
}

/// Reproducible passages of biography-style sentences, each with enough
/// names and numbers for the mock candidate extractor.
pub fn synthetic_corpus(seed: u64, n: usize) -> PassageStore {
    let passages = (0..n).map(|i| {
        let idx = i.to_string();
        let mut rng = seed::rng(seed, &["corpus", &idx]);
        let mut text = Vec::new();
        let mut tokens = 0;
        while tokens < 110 {
            let s = sentence(&mut rng);
            tokens += normalize(&s).len();
            text.push(s);
        }
        let tasks = (0..rng.random_range(5..9)).map(|t| format!("task{t}")).collect();
        Passage::from(PassageRecord {
            id: format!("syn-{i:04}"),
            title: format!("{} {}", FIRST[i % FIRST.len()], LAST[(i / FIRST.len()) % LAST.len()]),
            text: text.join(" "),
            tasks,
            provenance: serde_json::json!({"source": "synthetic", "index": i}),
        })
    });
    PassageStore::from_passages(passages).expect("synthetic ids are unique")
}

fn generator_seed(seed: u64, gaa: GaaSource) -> u64 {
    seed::derive(seed, &["generator", gaa.as_str()])
}

/// Mock generators for every source, a mock QA model and the heuristic
/// candidate extractor, all derived from `seed`.
pub fn mock_backends(seed: u64, qa_skill: f64) -> (Backends, Arc<MockQa>) {
    let qa = Arc::new(MockQa::new(seed::derive(seed, &["qa"]), qa_skill));
    let generators = GaaSource::ALL
        .into_iter()
        .map(|g| (g, Arc::new(MockGenerator::new(g.as_str(), generator_seed(seed, g))) as Arc<dyn QuestionGenerator>))
        .collect();
    (Backends { generators, qa: qa.clone(), candidates: Arc::new(MockCandidates) }, qa)
}

/// Fills one cache per assistant source over the whole corpus.
pub fn prewarm_caches(
    corpus: &PassageStore,
    backends: &Backends,
    params: PromptParams,
) -> Result<BTreeMap<GaaSource, PromptCache>, SimError> {
    let mut caches = BTreeMap::new();
    for gaa in GaaSource::ALL {
        let cache = PromptCache::new(gaa.as_str());
        let b = backends.for_source(gaa).expect("mock backends cover every source");
        for p in corpus.iter() {
            prewarm(&cache, p, b, params).map_err(|e| PreconditionError::new(e.to_string()))?;
        }
        caches.insert(gaa, cache);
    }
    Ok(caches)
}

/// What the simulator knows about one submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedExample {
    pub example_id: String,
    pub well_formed: bool,
    pub intended_fool: bool,
    pub queries: u32,
}

const EDIT_WORDS: [&str; 8] = ["exactly", "precisely", "really", "actually", "specifically", "once", "first", "still"];

/// Rewords a question: each word is replaced with probability
/// `strength`, and at least one word always changes.
pub fn edit_question(question: &str, strength: f64, rng: &mut ChaCha8Rng) -> String {
    let body = question.trim_end_matches('?');
    let mut tokens: Vec<String> = body.split_whitespace().map(str::to_owned).collect();
    if tokens.is_empty() {
        return format!("{} {}?", question.trim_end_matches('?'), EDIT_WORDS[0]);
    }
    let mut changed = false;
    for t in tokens.iter_mut() {
        if rng.random::<f64>() < strength {
            *t = EDIT_WORDS.choose(rng).unwrap().to_string();
            changed = true;
        }
    }
    if !changed {
        let i = rng.random_range(0..=tokens.len());
        tokens.insert(i, EDIT_WORDS.choose(rng).unwrap().to_string());
    }
    let edited = format!("{}?", tokens.join(" "));
    if edited == question {
        format!("{} {}?", body, EDIT_WORDS[1])
    } else {
        edited
    }
}

fn own_question(passage: &str, answer: &AnswerSpan, rng: &mut ChaCha8Rng) -> String {
    let before: Vec<&str> =
        words(passage).into_iter().filter(|w| w.char_end <= answer.char_start).map(|w| w.text).collect();
    let k = rng.random_range(1..=3).min(before.len());
    if k == 0 {
        return "Which detail opens the passage?".into();
    }
    format!("Which detail comes right after \"{}\"?", before[before.len() - k..].join(" "))
}

/// A span whose normalized tokens share nothing with `answer`.
fn decoy_for(passage: &str, answer: &AnswerSpan, rng: &mut ChaCha8Rng) -> Option<AnswerSpan> {
    let gold: BTreeSet<String> = normalize(&answer.text).into_tokens().into_iter().collect();
    let disjoint = |s: &AnswerSpan| {
        let t = normalize(&s.text);
        !t.is_empty() && t.tokens().iter().all(|x| !gold.contains(x))
    };
    let cands: Vec<AnswerSpan> = heuristic_candidates(passage).into_iter().map(|(s, _)| s).filter(disjoint).collect();
    if let Some(c) = cands.choose(rng) {
        return Some(c.clone());
    }
    let ws: Vec<AnswerSpan> =
        words(passage).iter().map(|w| AnswerSpan::new(w.text, w.char_start)).filter(disjoint).collect();
    ws.choose(rng).cloned()
}

fn jitter(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.5..1.5)
}

/// Writes and submits one example in the session's active slot, advancing
/// the clock by the simulated writing time.
#[allow(clippy::too_many_arguments)]
pub fn simulate_example(
    platform: &Platform,
    clock: &ManualClock,
    qa: &MockQa,
    session_id: &str,
    profile: &AnnotatorProfile,
    rng: &mut ChaCha8Rng,
    idempotency_key: &str,
) -> Result<SimulatedExample, PlatformError> {
    let session = platform.session(session_id).ok_or_else(|| PlatformError::UnknownSession(session_id.into()))?;
    let passage = platform.corpus().get(&session.passage_id).expect("session passage exists").clone();
    let setting = session.setting;

    let candidates = heuristic_candidates(&passage.text);
    let mut answer = match candidates.choose(rng) {
        Some((span, _)) => span.clone(),
        None => {
            let ws = words(&passage.text);
            let w = ws.choose(rng).expect("passages are nonempty");
            AnswerSpan::new(w.text, w.char_start)
        }
    };

    let total_ms = profile.base_time_ms as f64 * jitter(rng);
    let mut served: Option<ScoredPrompt> = None;
    let mut accepted = false;
    let mut queries = 0;
    if setting.gaa.is_some() && rng.random::<f64>() < profile.p_query {
        clock.advance((total_ms * 0.25) as u64);
        loop {
            let ask = if setting.answer_prompting { None } else { Some(&answer) };
            match platform.request_prompt(session_id, ask) {
                Ok(p) => {
                    queries += 1;
                    served = Some(p);
                }
                Err(PlatformError::Prompt(e)) => {
                    tracing::debug!(session = session_id, error = %e, "prompt unavailable, writing unassisted");
                    break;
                }
                Err(e) => return Err(e),
            }
            if rng.random::<f64>() < profile.p_accept {
                accepted = true;
                break;
            }
            if queries >= MAX_QUERIES_PER_EXAMPLE || rng.random::<f64>() >= profile.p_query {
                break;
            }
            clock.advance(1_000);
        }
    }

    let question = match (&served, accepted) {
        (Some(p), true) => {
            answer = p.answer.clone();
            p.question.clone()
        }
        (Some(p), false) => {
            answer = p.answer.clone();
            edit_question(&p.question, profile.edit_strength, rng)
        }
        (None, _) => own_question(&passage.text, &answer, rng),
    };

    let factor = match (&served, accepted) {
        (Some(_), true) => profile.time_saving_factor,
        (Some(_), false) => 1.0 - (1.0 - profile.time_saving_factor) / 2.0,
        (None, _) => 1.0,
    };

    let intended_fool = setting.is_adversarial()
        && served.as_ref().and_then(|p| p.adversary_f1).is_some_and(|f1| {
            let p_intent = profile.skill_lift * (1.0 - f1);
            rng.random::<f64>() < p_intent
        });
    let belief = if intended_fool { decoy_for(&passage.text, &answer, rng) } else { None };
    qa.register_gold(&passage.id, &question, belief.unwrap_or_else(|| answer.clone()));
    let well_formed = rng.random::<f64>() < profile.p_well_formed;

    let remaining = (total_ms * factor) as u64;
    let elapsed = clock.now_ms().saturating_sub(session.activated_at_ms);
    clock.advance(remaining.saturating_sub(elapsed).max(1));
    let outcome = platform.submit_example(session_id, &question, &answer, Some(idempotency_key))?;
    Ok(SimulatedExample { example_id: outcome.example_id, well_formed, intended_fool, queries })
}

struct CellOutput {
    events: Vec<Event>,
    records: Vec<ExampleRecord>,
    reports: Vec<MetricsReport>,
    flagged: BTreeSet<String>,
}

fn drain_validation(
    platform: &Platform,
    clock: &ManualClock,
    validators: &[String],
    truth: &BTreeMap<String, bool>,
    accuracy: f64,
    seed: u64,
) -> Result<(), PlatformError> {
    loop {
        let mut progressed = false;
        for v in validators {
            let Some(a) = platform.next_validation(v)? else { continue };
            progressed = true;
            let u = seed::unit(seed, &["vote", &a.task_id, v]);
            let correct = u < accuracy;
            let well_formed = truth.get(&a.task_id).copied().unwrap_or(true);
            let verdict = if well_formed == correct { Verdict::Valid } else { Verdict::Invalid };
            clock.advance(5_000 + (20_000.0 * seed::unit(seed, &["vote_time", &a.task_id, v])) as u64);
            platform.cast_vote(&a.task_id, v, verdict, Some("sim"))?;
        }
        if !progressed {
            return Ok(());
        }
    }
}

fn run_cell(
    cfg: &SimConfig,
    idx: usize,
    setting: ExperimentSetting,
    corpus: &PassageStore,
    caches: &BTreeMap<GaaSource, PromptCache>,
) -> Result<CellOutput, PlatformError> {
    let cell = format!("c{idx:02}");
    let cell_seed = seed::derive(cfg.seed, &["cell", &setting.label()]);
    let (backends, qa) = mock_backends(cfg.seed, cfg.qa_skill);
    let clock = Arc::new(ManualClock::new(SIM_EPOCH_MS + idx as u64 * DAY_MS));
    let sink = MemorySink::new();
    let mut pcfg = cfg.platform.clone();
    pcfg.seed = cell_seed;
    pcfg.id_prefix = format!("{cell}-");
    pcfg.settings = vec![setting];
    let platform = Platform::open(
        pcfg,
        corpus.clone(),
        backends,
        caches.clone(),
        clock.clone(),
        Box::new(sink.clone()),
        &[],
    )?;

    let sessions = cfg.examples_per_setting.div_ceil(EXAMPLES_PER_SESSION);
    let writers = sessions.div_ceil(SESSIONS_PER_WRITER).max(1);
    let validators: Vec<String> = (0..cfg.validators_per_setting).map(|j| format!("{cell}-v{j}")).collect();
    let mut truth = BTreeMap::new();
    let mut written = 0;
    for s in 0..sessions {
        let w = s % writers;
        let worker = format!("{cell}-w{w}");
        let profile = &cfg.profiles[w % cfg.profiles.len()];
        clock.advance(30_000);
        let session = platform.start_session(&worker, Some(setting))?;
        let n = EXAMPLES_PER_SESSION.min(cfg.examples_per_setting - written);
        for k in 0..n {
            let key = format!("{s}-{k}");
            let mut rng = seed::rng(cell_seed, &["example", &key]);
            let ex = simulate_example(&platform, &clock, &qa, &session.session_id, profile, &mut rng, &key)?;
            truth.insert(ex.example_id, ex.well_formed);
            written += 1;
        }
        drain_validation(&platform, &clock, &validators, &truth, cfg.validator_accuracy, cell_seed)?;
    }
    Ok(CellOutput { events: sink.events(), records: platform.records(), reports: platform.reports(), flagged: platform.flagged_workers() })
}

/// Runs every setting and collects the combined log and one report per
/// setting. A failing setting is reported and skipped.
pub fn run_experiment(cfg: &SimConfig) -> Result<ExperimentOutput, SimError> {
    if cfg.examples_per_setting < EXAMPLES_PER_SESSION {
        return Err(PreconditionError::new(format!("examples_per_setting must be at least {EXAMPLES_PER_SESSION}")).into());
    }
    if cfg.profiles.is_empty() {
        return Err(PreconditionError::new("at least one annotator profile is required").into());
    }
    for p in &cfg.profiles {
        p.validate()?;
    }
    if cfg.validators_per_setting < 3 {
        return Err(PreconditionError::new("at least three validators are needed per setting").into());
    }
    if !(0.0..=1.0).contains(&cfg.validator_accuracy) || !(0.0..=1.0).contains(&cfg.qa_skill) {
        return Err(PreconditionError::new("validator accuracy and QA skill must lie in [0, 1]").into());
    }
    for s in &cfg.settings {
        s.validate().map_err(|e| PreconditionError::new(e.to_string()))?;
    }
    cfg.platform.validate()?;

    let corpus = synthetic_corpus(cfg.seed, cfg.passages);
    let (backends, _) = mock_backends(cfg.seed, cfg.qa_skill);
    let caches = prewarm_caches(&corpus, &backends, cfg.platform.prompt)?;

    let cells: Vec<(usize, ExperimentSetting)> = cfg.settings.iter().copied().enumerate().collect();
    let run = |&(idx, setting): &(usize, ExperimentSetting)| (setting, run_cell(cfg, idx, setting, &corpus, &caches));
    let results: Vec<_> = if cfg.concurrent { cells.par_iter().map(run).collect() } else { cells.iter().map(run).collect() };

    let mut out = ExperimentOutput {
        events: Vec::new(),
        reports: Vec::new(),
        generations: BTreeMap::new(),
        failures: Vec::new(),
    };
    let mut flagged = BTreeSet::new();
    let mut records = Vec::new();
    for (setting, r) in results {
        match r {
            Ok(cell) => {
                out.events.extend(cell.events);
                out.reports.extend(cell.reports);
                flagged.extend(cell.flagged);
                records.extend(cell.records);
            }
            Err(e) => {
                tracing::warn!(setting = %setting, error = %e, "setting aborted");
                out.failures.push(SettingFailure { setting, message: e.to_string() });
            }
        }
    }
    out.generations = generation_tables(&records, &flagged);
    Ok(out)
}

/// Averages of generator queries per example over resolved assisted
/// records, grouped by assistant training source, sampler, and answer
/// prompting.
pub fn generation_tables(
    records: &[ExampleRecord],
    flagged: &BTreeSet<String>,
) -> BTreeMap<GroupBy, Vec<GenerationsRow>> {
    let kept: Vec<&ExampleRecord> = records
        .iter()
        .filter(|r| !flagged.contains(&r.worker_id) && r.validity != Validity::Pending)
        .collect();
    GroupBy::ALL.into_iter().map(|g| (g, generations_per_example(&kept, g))).collect()
}
