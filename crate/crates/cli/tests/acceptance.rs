//! Acceptance checks. Prints one PASS or FAIL line per criterion and exits
//! nonzero if any fails. Every check compares against a brute-force oracle
//! written here, not against the library's own helpers.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use gaa_core::annotation::{ExampleRecord, Validity};
use gaa_core::backend::mock::{heuristic_candidates, MockCandidates, MockGenerator, MockQa};
use gaa_core::backend::AnswerSpan;
use gaa_core::clock::ManualClock;
use gaa_core::corpus::{filter_passages, ExclusionIndex, FilterParams, Passage, PassageRecord, PassageStore};
use gaa_core::events::{parse_jsonl, to_jsonl, Event, MemorySink, Payload};
use gaa_core::metrics::{generations_per_example, render_table, GenerationsRow, GroupBy, MetricsReport};
use gaa_core::platform::{Platform, PlatformConfig};
use gaa_core::prompt::{
    next_prompt, order_candidates, prompt_id, CacheKey, Origin, PromptBackends, PromptCache, PromptError, PromptMode,
    PromptParams, SamplingStrategy, ScoredPrompt,
};
use gaa_core::setting::{setting_matrix, CollectionMode, ExperimentSetting, GaaSource};
use gaa_core::sim::{mock_backends, prewarm_caches, synthetic_corpus};
use gaa_core::text::f1_overlap;
use gaa_core::validation::{resolve, QualityPolicy, ValidationTask, Verdict};
use gaa_service::ServiceConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration) -> Result<String, String> {
    let took = start.elapsed();
    ensure!(took < limit, "took {:.2}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64());
    Ok(format!("{:.2}s", took.as_secs_f64()))
}

// 1

fn f1_oracle(pred: &[&str], gold: &[&str]) -> (f64, f64, f64) {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return (1.0, 1.0, 1.0),
        (true, false) | (false, true) => return (0.0, 0.0, 0.0),
        _ => {}
    }
    let distinct: BTreeSet<&str> = pred.iter().chain(gold).copied().collect();
    let common: usize = distinct
        .iter()
        .map(|t| pred.iter().filter(|p| *p == t).count().min(gold.iter().filter(|g| *g == t).count()))
        .sum();
    if common == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    (2.0 * p * r / (p + r), p, r)
}

fn f1_matches_multiset_oracle() -> Result<String, String> {
    const ALPHABET: [&str; 4] = ["w", "x", "y", "z"];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bag = |rng: &mut ChaCha8Rng| -> Vec<&str> {
        let n = rng.random_range(0..=6);
        (0..n).map(|_| ALPHABET[rng.random_range(0..4)]).collect()
    };
    let start = Instant::now();
    for i in 0..10_000 {
        let (a, b) = (bag(&mut rng), bag(&mut rng));
        let got = f1_overlap(&a.join(" "), &b.join(" "));
        let want = f1_oracle(&a, &b);
        ensure!((got.value, got.precision, got.recall) == want, "pair {i} {a:?} {b:?}: got {got:?}, want {want:?}");
    }
    Ok(format!("10000 pairs in {}", within(start, Duration::from_secs(5))?))
}

// 2

fn window_overlap(text: &[&str], excluded: &[Vec<&str>], n: usize) -> bool {
    for i in 0..text.len() {
        if i + n > text.len() {
            break;
        }
        for ex in excluded {
            for j in 0..ex.len() {
                if j + n > ex.len() {
                    break;
                }
                if (0..n).all(|k| text[i + k] == ex[j + k]) {
                    return true;
                }
            }
        }
    }
    false
}

fn filter_matches_window_scan() -> Result<String, String> {
    const ALPHABET: [&str; 4] = ["w", "x", "y", "z"];
    const N: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    for c in 0..500 {
        let words = |rng: &mut ChaCha8Rng, max: usize| -> Vec<&str> {
            let n = rng.random_range(0..=max);
            (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
        };
        let excluded: Vec<Vec<&str>> = (0..rng.random_range(0..=3)).map(|_| words(&mut rng, 8)).collect();
        let mut passages = Vec::new();
        for i in 0..rng.random_range(0..=8) {
            let text = words(&mut rng, 10);
            let tasks = (0..rng.random_range(0..=3)).map(|t| format!("t{t}")).collect();
            passages.push((format!("p{i}"), text, tasks));
        }
        let params = FilterParams {
            min_tokens: rng.random_range(0..=4),
            max_tokens: rng.random_range(3..=10),
            min_tasks: rng.random_range(0..=3),
        };

        let want: BTreeSet<String> = passages
            .iter()
            .filter(|(_, text, tasks): &&(String, Vec<&str>, Vec<String>)| {
                text.len() >= params.min_tokens
                    && text.len() <= params.max_tokens
                    && tasks.len() >= params.min_tasks
                    && !window_overlap(text, &excluded, N)
            })
            .map(|(id, _, _)| id.clone())
            .collect();

        let store = PassageStore::from_passages(passages.iter().map(|(id, text, tasks)| {
            Passage::from(PassageRecord {
                id: id.clone(),
                title: id.clone(),
                text: text.join(" "),
                tasks: tasks.clone(),
                provenance: serde_json::Value::Null,
            })
        }))
        .map_err(|e| e.to_string())?;
        let texts: Vec<String> = excluded.iter().map(|e| e.join(" ")).collect();
        let index = ExclusionIndex::build(&texts, N).map_err(|e| e.to_string())?;
        let (kept, report) = filter_passages(&store, params, &index);
        let got: BTreeSet<String> = kept.iter().map(|p| p.id.clone()).collect();
        ensure!(got == want, "corpus {c}: kept {got:?}, oracle {want:?}");
        ensure!(report.kept == want.len(), "corpus {c}: report {report:?}");
    }
    Ok(format!("500 corpora in {}", within(start, Duration::from_secs(10))?))
}

// 3

fn random_prompt(rng: &mut ChaCha8Rng) -> ScoredPrompt {
    let opt = |rng: &mut ChaCha8Rng| [None, Some(0.0), Some(0.5), Some(1.0)][rng.random_range(0..4)];
    let question = ["Who?", "When?", "Where?"][rng.random_range(0..3)].to_owned();
    let answer = [AnswerSpan::new("Ada", 0), AnswerSpan::new("1843", 10)][rng.random_range(0..2)].clone();
    let generator_id = ["squad", "combined"][rng.random_range(0..2)].to_owned();
    let key = CacheKey::new("p", &answer);
    ScoredPrompt {
        id: prompt_id(&generator_id, &key, &question),
        generator_id,
        passage_id: "p".into(),
        question,
        answer,
        log_likelihood: [-0.5, -1.0, -2.0][rng.random_range(0..3)],
        adversary_f1: opt(rng),
        qa_confidence: opt(rng),
        origin: if rng.random_bool(0.5) { Origin::Cached } else { Origin::Live },
    }
}

fn sampler_contract() -> Result<String, String> {
    use std::cmp::Ordering;
    use SamplingStrategy::*;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = Instant::now();
    for set in 0..1000 {
        let prompts: Vec<ScoredPrompt> = (0..rng.random_range(0..=8)).map(|_| random_prompt(&mut rng)).collect();
        for strategy in SamplingStrategy::ALL {
            let cmp = |a: &ScoredPrompt, b: &ScoredPrompt| gaa_core::prompt::compare(a, b, strategy);
            for a in &prompts {
                for b in &prompts {
                    ensure!(cmp(a, b) == cmp(b, a).reverse(), "set {set}: asymmetric");
                    ensure!((cmp(a, b) == Ordering::Equal) == (a == b), "set {set}: distinct prompts tie");
                    for c in &prompts {
                        if cmp(a, b) != Ordering::Greater && cmp(b, c) != Ordering::Greater {
                            ensure!(cmp(a, c) != Ordering::Greater, "set {set}: not transitive");
                        }
                    }
                }
            }
            let ordered = order_candidates(&prompts, strategy);
            ensure!(ordered.windows(2).all(|w| cmp(&w[0], &w[1]) != Ordering::Greater), "set {set}: unsorted");
            let mut shuffled = prompts.clone();
            shuffled.shuffle(&mut rng);
            ensure!(order_candidates(&shuffled, strategy) == ordered, "set {set}: depends on input order");

            let Some(first) = ordered.first() else { continue };
            let ok = match strategy {
                Likelihood => prompts.iter().all(|p| first.log_likelihood >= p.log_likelihood),
                Adversarial => prompts.iter().filter_map(|p| p.adversary_f1).all(|v| first.adversary_f1.is_some_and(|f| f <= v)),
                Uncertainty => prompts.iter().filter_map(|p| p.qa_confidence).all(|v| first.qa_confidence.is_some_and(|c| c <= v)),
            };
            ensure!(ok, "set {set}: first element is not the {} extreme", strategy.as_str());
        }
    }
    Ok(format!("1000 sets in {}", within(start, Duration::from_secs(5))?))
}

// 4

const PASSAGE: &str = "Ada Lovelace wrote notes in 1843 about the engine in London.";
const MAX_POPS: usize = 6;
const SESSIONS: usize = 4;

struct CacheWorld<'a> {
    passage: Passage,
    backends: PromptBackends<'a>,
    strategy: SamplingStrategy,
    mode: PromptMode,
    answers: [AnswerSpan; SESSIONS],
}

#[derive(Default)]
struct Tally {
    pops: usize,
    cached: usize,
    fallbacks: usize,
}

fn span(text: &str) -> AnswerSpan {
    AnswerSpan::new(text, PASSAGE.find(text).expect("span is in the passage"))
}

fn cached(answer: &AnswerSpan, q: &str, ll: f64, f1: Option<f64>, conf: Option<f64>) -> ScoredPrompt {
    let key = CacheKey::new("p", answer);
    ScoredPrompt {
        id: prompt_id("squad", &key, q),
        generator_id: "squad".into(),
        passage_id: "p".into(),
        question: q.into(),
        answer: answer.clone(),
        log_likelihood: ll,
        adversary_f1: f1,
        qa_confidence: conf,
        origin: Origin::Cached,
    }
}

/// Tries every session at every step, so each interleaving of up to
/// `MAX_POPS` pops is visited once. `model` holds what should still be queued.
fn explore(
    w: &CacheWorld<'_>,
    cache: &PromptCache,
    model: &[ScoredPrompt],
    served: &BTreeSet<String>,
    depth: usize,
    tally: &mut Tally,
) -> Result<(), String> {
    for s in 0..SESSIONS {
        let cache = cache.clone();
        let mut model = model.to_vec();
        let mut served = served.clone();
        let key = CacheKey::new("p", &w.answers[s]);
        let eligible: Vec<ScoredPrompt> = model
            .iter()
            .filter(|p| p.eligible_for(w.strategy) && (w.mode == PromptMode::AnswerAndQuestion || p.key() == key))
            .cloned()
            .collect();
        let answer = (w.mode == PromptMode::QuestionOnly).then_some(&w.answers[s]);
        let got = next_prompt(&cache, &w.passage, w.backends, PromptParams { depth: 3, top_p: 0.75 }, answer, w.strategy, w.mode);
        tally.pops += 1;
        match (order_candidates(&eligible, w.strategy).first(), got) {
            (Some(want), Ok(p)) => {
                ensure!(p == *want, "depth {depth} session {s}: served {} instead of {}", p.question, want.question);
                model.retain(|m| m.id != p.id);
                tally.cached += 1;
                ensure!(served.insert(p.id), "depth {depth} session {s}: prompt served twice");
            }
            (Some(_), Err(e)) => return Err(format!("depth {depth} session {s}: fell back with prompts queued: {e}")),
            (None, Ok(p)) => {
                ensure!(p.origin == Origin::Live, "depth {depth} session {s}: cached prompt without an eligible entry");
                ensure!(served.insert(p.id), "depth {depth} session {s}: live prompt served twice");
                tally.fallbacks += 1;
            }
            (None, Err(PromptError::Unavailable { .. })) => tally.fallbacks += 1,
            (None, Err(e)) => return Err(format!("depth {depth} session {s}: {e}")),
        }
        let queued: usize = cache.snapshot().queues.values().map(Vec::len).sum();
        ensure!(queued == model.len(), "depth {depth}: cache holds {queued}, model {}", model.len());
        if depth + 1 < MAX_POPS {
            explore(w, &cache, &model, &served, depth + 1, tally)?;
        }
    }
    Ok(())
}

fn cache_state_machine() -> Result<String, String> {
    let passage = Passage::from(PassageRecord {
        id: "p".into(),
        title: "Ada".into(),
        text: PASSAGE.into(),
        tasks: Vec::new(),
        provenance: serde_json::Value::Null,
    });
    let generator = MockGenerator::new("squad", 4);
    let qa = MockQa::new(4, 0.9);
    let backends = PromptBackends { generator: &generator, qa: &qa, candidates: &MockCandidates };
    let (a, b, m) = (span("Ada Lovelace"), span("1843"), span("London"));

    let full = vec![
        cached(&a, "Who wrote notes?", -1.0, Some(0.5), Some(0.9)),
        cached(&a, "Who wrote the notes?", -1.0, None, None),
        cached(&a, "Whose notes?", -2.0, Some(0.0), Some(0.4)),
        cached(&b, "When were the notes written?", -0.5, Some(1.0), Some(0.4)),
        cached(&b, "What year?", -3.0, Some(0.0), Some(0.2)),
    ];
    let caches = [full.clone(), full[..3].to_vec(), Vec::new()];
    let patterns = [
        [a.clone(), a.clone(), a.clone(), a.clone()],
        [a.clone(), b.clone(), a.clone(), b.clone()],
        [a.clone(), m.clone(), b.clone(), m.clone()],
        [m.clone(), m.clone(), m.clone(), m.clone()],
    ];
    let mut tally = Tally::default();
    let start = Instant::now();
    for strategy in SamplingStrategy::ALL {
        for mode in [PromptMode::QuestionOnly, PromptMode::AnswerAndQuestion] {
            // the engine picks the answer, so session answers do not matter
            let patterns = if mode == PromptMode::QuestionOnly { &patterns[..] } else { &patterns[..1] };
            for answers in patterns {
                for contents in &caches {
                    let cache = PromptCache::new("squad");
                    cache.insert(contents.clone());
                    let w = CacheWorld { passage: passage.clone(), backends, strategy, mode, answers: answers.clone() };
                    explore(&w, &cache, contents, &BTreeSet::new(), 0, &mut tally)
                        .map_err(|e| format!("{} {mode:?}: {e}", strategy.as_str()))?;
                }
            }
        }
    }
    ensure!(tally.cached > 0 && tally.fallbacks > 0, "degenerate run");
    Ok(format!(
        "{} pops over all interleavings ({} cached, {} fallbacks) in {:.2}s",
        tally.pops,
        tally.cached,
        tally.fallbacks,
        start.elapsed().as_secs_f64()
    ))
}

// 5 and 8 share a random workload

struct Workload {
    rng: ChaCha8Rng,
    settings: BTreeMap<String, ExperimentSetting>,
    submissions: usize,
}

const WRITERS: [&str; 8] = ["w0", "w1", "w2", "w3", "w4", "w5", "spam0", "spam1"];
const VALIDATORS: [&str; 5] = ["v0", "v1", "v2", "v3", "v4"];

impl Workload {
    fn new(seed: u64) -> Self {
        Workload { rng: ChaCha8Rng::seed_from_u64(seed), settings: BTreeMap::new(), submissions: 0 }
    }

    /// One writer or validator action. Platform errors are part of the
    /// workload (exhausted corpus, empty queue) and are skipped.
    fn step(&mut self, platform: &Platform, clock: Option<&ManualClock>) {
        let matrix = setting_matrix();
        let advance = |rng: &mut ChaCha8Rng, lo: u64, hi: u64| {
            if let Some(c) = clock {
                c.advance(rng.random_range(lo..hi));
            }
        };
        if self.rng.random_bool(0.55) {
            let worker = WRITERS[self.rng.random_range(0..WRITERS.len())];
            let setting = *self.settings.entry(worker.to_owned()).or_insert(matrix[self.rng.random_range(0..matrix.len())]);
            let Ok(session) = platform.start_session(worker, Some(setting)) else { return };
            let text = platform.corpus().get(&session.passage_id).expect("stored passage").text.clone();
            let candidates = heuristic_candidates(&text);
            let mut answer = candidates[self.rng.random_range(0..candidates.len())].0.clone();
            let mut last = None;
            if setting.gaa.is_some() && self.rng.random_bool(0.7) {
                for _ in 0..self.rng.random_range(1..=3) {
                    let a = (!setting.answer_prompting).then_some(&answer);
                    if let Ok(p) = platform.request_prompt(&session.session_id, a) {
                        last = Some(p);
                    }
                    advance(&mut self.rng, 1_000, 20_000);
                }
            }
            advance(&mut self.rng, 5_000, 120_000);
            let question = match &last {
                Some(p) if self.rng.random_bool(0.5) => {
                    answer = p.answer.clone();
                    p.question.clone()
                }
                Some(p) => {
                    answer = p.answer.clone();
                    format!("{} exactly", p.question.trim_end_matches('?'))
                }
                None => format!("Which {} is meant here?", answer.text),
            };
            self.submissions += 1;
            let key = format!("k{}", self.submissions);
            if platform.submit_example(&session.session_id, &question, &answer, Some(&key)).is_ok()
                && self.rng.random_bool(0.1)
            {
                // a retried request
                let _ = platform.submit_example(&session.session_id, &question, &answer, Some(&key));
            }
        } else {
            let validator = VALIDATORS[self.rng.random_range(0..VALIDATORS.len())];
            let Ok(Some(a)) = platform.next_validation(validator) else { return };
            let author = platform.task(&a.task_id).expect("assigned task exists").author;
            let verdict = if author.starts_with("spam") || self.rng.random_bool(0.2) {
                Verdict::Invalid
            } else {
                Verdict::Valid
            };
            advance(&mut self.rng, 1_000, 10_000);
            let _ = platform.cast_vote(&a.task_id, validator, verdict, Some("once"));
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v
}

/// Everything recomputed from the raw log: records with their resolution,
/// flagged authors, and one report per setting.
fn oracle(events: &[Event], threshold: f64) -> Result<(Vec<ExampleRecord>, Vec<MetricsReport>), String> {
    let mut records: Vec<ExampleRecord> = Vec::new();
    let mut votes: BTreeMap<String, Vec<Verdict>> = BTreeMap::new();
    let mut resolved: BTreeMap<String, Validity> = BTreeMap::new();
    // per session: when the current example started, and prompts served since
    let mut open: BTreeMap<String, (u64, u32)> = BTreeMap::new();
    for e in events {
        let sid = e.session_id.clone().unwrap_or_default();
        match &e.payload {
            Payload::SessionStarted(_) => {
                open.insert(sid, (e.timestamp_ms, 0));
            }
            Payload::PromptServed(_) => open.get_mut(&sid).ok_or("prompt outside a session")?.1 += 1,
            Payload::ExampleSubmitted(s) => {
                let (since, queries) = open.insert(sid, (e.timestamp_ms, 0)).ok_or("submit outside a session")?;
                let r = &s.record;
                ensure!(r.duration_ms == e.timestamp_ms - since, "{}: duration {}", r.example_id, r.duration_ms);
                ensure!(r.generator_queries == queries, "{}: {} queries, log shows {queries}", r.example_id, r.generator_queries);
                records.push(r.clone());
            }
            Payload::VoteCast(v) => {
                let cast = votes.entry(v.task_id.clone()).or_default();
                cast.push(v.verdict);
                if cast.len() == 3 {
                    let valid = cast.iter().filter(|v| **v == Verdict::Valid).count();
                    resolved.insert(v.task_id.clone(), if valid >= 2 { Validity::Valid } else { Validity::Invalid });
                }
            }
            Payload::ValidationResolved(r) => {
                ensure!(resolved.get(&r.task_id) == Some(&r.resolution), "{}: resolution disagrees with votes", r.task_id);
            }
            Payload::ValidationAssigned(_) | Payload::BonusAccrued(_) => {}
        }
    }
    for r in &mut records {
        r.validity = resolved.get(&r.example_id).copied().unwrap_or(Validity::Pending);
    }

    let mut flagged = BTreeSet::new();
    let authors: BTreeSet<&str> = records.iter().map(|r| r.worker_id.as_str()).collect();
    for a in authors {
        let done: Vec<&ExampleRecord> = records.iter().filter(|r| r.worker_id == a && r.validity != Validity::Pending).collect();
        let invalid = done.iter().filter(|r| r.validity == Validity::Invalid).count();
        if !done.is_empty() && invalid as f64 / done.len() as f64 > threshold {
            flagged.insert(a.to_owned());
        }
    }

    let mut reports = Vec::new();
    for s in setting_matrix() {
        let mine: Vec<&ExampleRecord> = records.iter().filter(|r| r.setting == s).collect();
        let kept: Vec<&ExampleRecord> =
            mine.iter().copied().filter(|r| !flagged.contains(&r.worker_id) && r.validity != Validity::Pending).collect();
        let vmfe: Vec<&ExampleRecord> =
            kept.iter().copied().filter(|r| r.fooled == Some(true) && r.validity == Validity::Valid).collect();
        let secs = |rs: &[&ExampleRecord]| sorted(rs.iter().map(|r| r.duration_ms as f64 / 1000.0).collect());
        let t = secs(&kept);
        let (med, mad) = if t.is_empty() {
            (None, None)
        } else {
            let m = median(&t);
            (Some(m), Some(median(&sorted(t.iter().map(|x| (x - m).abs()).collect()))))
        };
        let adversarial = s.collection_mode == CollectionMode::Adversarial;
        let total_ms: u64 = kept.iter().map(|r| r.duration_ms).sum();
        reports.push(MetricsReport {
            setting: s,
            n_examples: kept.len(),
            n_pending: mine.iter().filter(|r| !flagged.contains(&r.worker_id) && r.validity == Validity::Pending).count(),
            n_excluded_flagged: mine.iter().filter(|r| flagged.contains(&r.worker_id)).count(),
            n_vmfe: vmfe.len(),
            median_time_s: med,
            time_mad_s: mad,
            vmer: (adversarial && !kept.is_empty()).then(|| vmfe.len() as f64 / kept.len() as f64),
            time_per_vmfe_s: (adversarial && !vmfe.is_empty()).then(|| total_ms as f64 / 1000.0 / vmfe.len() as f64),
            median_time_per_vmfe_s: (adversarial && !vmfe.is_empty()).then(|| median(&secs(&vmfe))),
            avg_generations_per_example: (s.gaa.is_some() && !kept.is_empty()).then(|| {
                kept.iter().map(|r| u64::from(r.generator_queries)).sum::<u64>() as f64 / kept.len() as f64
            }),
        });
    }
    Ok((records, reports))
}

fn generations_oracle(records: &[ExampleRecord], by: GroupBy) -> Vec<GenerationsRow> {
    let mut groups: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for r in records {
        let (Some(gaa), Some(sampler)) = (r.setting.gaa, r.setting.sampler) else { continue };
        let g = match by {
            GroupBy::GaaTraining => gaa.as_str().to_owned(),
            GroupBy::Sampler => sampler.as_str().to_owned(),
            GroupBy::AnswerPrompting => r.setting.answer_prompting.to_string(),
        };
        groups.entry(g).or_default().push(r.generator_queries);
    }
    groups
        .into_iter()
        .map(|(group, q)| GenerationsRow {
            group,
            n_examples: q.len(),
            avg_generations: q.iter().map(|x| u64::from(*x)).sum::<u64>() as f64 / q.len() as f64,
        })
        .collect()
}

fn metrics_match_oracle() -> Result<String, String> {
    let corpus = synthetic_corpus(5, 6);
    let (backends, _) = mock_backends(5, 0.8);
    let caches = prewarm_caches(&corpus, &backends, PromptParams { depth: 3, top_p: 0.75 }).map_err(|e| e.to_string())?;
    let (mut events_total, mut flagged_logs, mut vmfe_reports) = (0, 0, 0);
    for log in 0..200u64 {
        let clock = Arc::new(ManualClock::new(1_000_000));
        let sink = MemorySink::new();
        let config = PlatformConfig { seed: log, ..Default::default() };
        let platform = Platform::open(
            config.clone(),
            corpus.clone(),
            backends.clone(),
            caches.clone(),
            clock.clone(),
            Box::new(sink.clone()),
            &[],
        )
        .map_err(|e| e.to_string())?;
        let mut w = Workload::new(log);
        for _ in 0..80 {
            w.step(&platform, Some(&clock));
        }

        let events = parse_jsonl(to_jsonl(&sink.events()).as_bytes()).map_err(|e| e.to_string())?;
        events_total += events.len();
        let (records, want) = oracle(&events, config.quality.threshold).map_err(|e| format!("log {log}: {e}"))?;
        let got = platform.reports();
        ensure!(got == want, "log {log}: reports differ\n got {got:?}\nwant {want:?}");
        flagged_logs += usize::from(!platform.flagged_workers().is_empty());
        vmfe_reports += got.iter().filter(|r| r.time_per_vmfe_s.is_some()).count();

        let live = platform.records();
        let refs: Vec<&ExampleRecord> = live.iter().collect();
        for by in GroupBy::ALL {
            ensure!(
                generations_per_example(&refs, by) == generations_oracle(&records, by),
                "log {log}: generations by {} differ",
                by.as_str()
            );
        }
        if log == 0 {
            let table = render_table(&got, false);
            let header = table.lines().next().unwrap_or_default();
            for col in ["t (s)", "vMER (%)", "t/vMFE (s)"] {
                ensure!(header.contains(col), "table header lacks {col}: {header}");
            }
            let row = got.iter().find(|r| r.median_time_s.is_some()).ok_or("no timed setting")?;
            let cell = format!("{:.1}_{{{:.1}}}", row.median_time_s.unwrap_or_default(), row.time_mad_s.unwrap_or_default());
            ensure!(table.contains(&cell), "table lacks a t cell with MAD subscript ({cell})");
        }
    }
    ensure!(flagged_logs > 0 && vmfe_reports > 0, "degenerate logs");
    Ok(format!("200 logs, {events_total} events, {flagged_logs} with flagged workers, {vmfe_reports} reports with t/vMFE"))
}

// 6

fn matrix_is_twenty() -> Result<String, String> {
    let m = setting_matrix();
    ensure!(m.len() == 20, "{} settings", m.len());
    let distinct: BTreeSet<_> = m.iter().collect();
    ensure!(distinct.len() == 20, "duplicate settings");
    let baselines = m.iter().filter(|s| s.gaa.is_none()).count();
    let standard = m.iter().filter(|s| s.gaa.is_some() && s.collection_mode == CollectionMode::Standard).count();
    let adversarial = m
        .iter()
        .filter(|s| s.gaa.is_some() && s.collection_mode == CollectionMode::Adversarial && !s.answer_prompting)
        .count();
    let answers = m.iter().filter(|s| s.answer_prompting).count();
    let split = [baselines, standard, adversarial, answers];
    ensure!(split == [2, 3, 9, 6], "split {split:?}");
    Ok("20 settings, split 2/3/9/6".into())
}

// 7

fn files_under(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).map_err(|e| e.to_string())?.display().to_string();
                out.insert(rel, std::fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn simulate_is_reproducible() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    let mut slowest = Duration::ZERO;
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let start = Instant::now();
        let status = Command::new(env!("CARGO_BIN_EXE_gaa"))
            .args(["simulate", "--seed", "17", "--examples", "50", "--out"])
            .arg(&out)
            .env("RUST_LOG", "error")
            .output()
            .map_err(|e| e.to_string())?;
        slowest = slowest.max(start.elapsed());
        ensure!(status.status.success(), "simulate failed: {}", String::from_utf8_lossy(&status.stderr));
        runs.push(files_under(&out)?);
    }
    ensure!(runs[0] == runs[1], "outputs differ between runs");
    let events = String::from_utf8_lossy(&runs[0]["events.jsonl"]).lines().count();
    let reports = runs[0].keys().filter(|k| k.starts_with("reports")).count();
    ensure!(reports == 20, "{reports} setting reports");
    ensure!(slowest < Duration::from_secs(60), "run took {:.1}s", slowest.as_secs_f64());
    Ok(format!("{} identical files, {events} events, slowest run {:.2}s", runs[0].len(), slowest.as_secs_f64()))
}

// 8

fn restart_reconstructs_projections() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus_path = tmp.path().join("passages.jsonl");
    let corpus = synthetic_corpus(8, 12);
    std::fs::write(&corpus_path, corpus.to_jsonl()).map_err(|e| e.to_string())?;
    let unused = "http://127.0.0.1:9".to_owned();
    let config = ServiceConfig {
        storage_dir: tmp.path().join("store"),
        corpus_path,
        squad_generator_url: Some(unused.clone()),
        adversarial_qa_generator_url: Some(unused.clone()),
        combined_generator_url: Some(unused.clone()),
        qa_url: Some(unused.clone()),
        candidates_url: Some(unused),
        fsync: false,
        ..Default::default()
    };
    let (backends, _) = mock_backends(8, 0.8);
    let caches = prewarm_caches(&corpus, &backends, PromptParams { depth: 3, top_p: 0.75 }).map_err(|e| e.to_string())?;
    for gaa in GaaSource::ALL {
        let path = config.cache_path(gaa);
        std::fs::create_dir_all(path.parent().ok_or("cache path")?).map_err(|e| e.to_string())?;
        std::fs::write(&path, caches[&gaa].to_jsonl()).map_err(|e| e.to_string())?;
    }

    let (before, before_caches, before_reports, events) = {
        let platform = gaa_service::open_platform(&config, backends.clone()).map_err(|e| e.to_string())?;
        let mut w = Workload::new(8);
        while platform.event_count() < 1000 {
            w.step(&platform, None);
        }
        (platform.snapshot(), platform.cache_states(), platform.reports(), platform.event_count())
    };
    let platform = gaa_service::open_platform(&config, backends).map_err(|e| e.to_string())?;
    ensure!(platform.snapshot() == before, "projection differs after restart");
    ensure!(platform.cache_states() == before_caches, "cache state differs after restart");
    ensure!(platform.reports() == before_reports, "reports differ after restart");
    Ok(format!("{events} events replayed, {} examples, {} tasks", before.examples.len(), before.tasks.len()))
}

// 9

fn votes_are_order_independent() -> Result<String, String> {
    let verdicts = [Verdict::Valid, Verdict::Invalid];
    let mut by_multiset: BTreeMap<usize, BTreeSet<Validity>> = BTreeMap::new();
    for bits in 0..8u32 {
        let seq: Vec<Verdict> = (0..3).map(|i| verdicts[((bits >> i) & 1) as usize]).collect();
        let mut task = ValidationTask::new("t", "author");
        let pool = ["v0", "v1", "v2"];
        let mut outcome = Validity::Pending;
        for v in &seq {
            let who = task.assign(&pool).map_err(|e| e.to_string())?.to_owned();
            outcome = task.cast_vote(&who, *v).map_err(|e| e.to_string())?;
        }
        ensure!(outcome == resolve(seq.iter().copied()), "{seq:?}: task and resolve disagree");
        let valid = seq.iter().filter(|v| **v == Verdict::Valid).count();
        by_multiset.entry(valid).or_default().insert(outcome);
    }
    ensure!(by_multiset.values().all(|o| o.len() == 1), "order changed a resolution: {by_multiset:?}");
    let policy = QualityPolicy::default();
    ensure!(!policy.flags_rate(0.95), "0.95 flags");
    ensure!(policy.flags_rate(0.951), "0.951 does not flag");
    Ok("8 orderings over 4 multisets agree; 0.95 kept, 0.951 flagged".into())
}

fn main() {
    let checks: [(&str, Check); 9] = [
        ("f1_overlap equals the multiset-intersection oracle", f1_matches_multiset_oracle),
        ("filter_passages equals a quadratic window scan", filter_matches_window_scan),
        ("sampler order is total, permutation-invariant, extreme-first", sampler_contract),
        ("prompt cache never repeats and falls back only when it must", cache_state_machine),
        ("incremental metrics equal a brute-force pass over the log", metrics_match_oracle),
        ("setting matrix has 20 settings split 2/3/9/6", matrix_is_twenty),
        ("simulate is byte-reproducible and fast", simulate_is_reproducible),
        ("restart rebuilds identical projections", restart_reconstructs_projections),
        ("vote order is irrelevant and the quality flag is strict", votes_are_order_independent),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS {}: {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}: {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
