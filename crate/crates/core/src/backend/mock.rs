//! Deterministic stand-ins for the three model backends.
//!
//! Each mock is a pure function of its request and its seed. They are crude on
//! purpose: the generator fills a fixed template, the QA model either finds
//! the span a template question points at or picks some other candidate, and
//! the candidate extractor returns capitalized runs and numbers.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::Rng;

use super::{
    AnswerSpan, BackendError, CandidateExtractor, CandidatesRequest, CandidatesResponse,
    GenerateRequest, GenerateResponse, QaModel, QaRequest, QaResponse, QuestionGenerator,
    WireCandidate, WireQuestion,
};
use crate::seed;
use crate::text::normalize;

/// Hard cap on heuristic candidates per passage.
pub const MAX_MOCK_CANDIDATES: usize = 20;

const QUESTION_PREFIX: &str = "What is ";
const MAX_CONTEXT_WORDS: usize = 6;

/// A whitespace token with surrounding non-alphanumerics trimmed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word<'a> {
    pub text: &'a str,
    pub char_start: usize,
    pub char_end: usize,
    /// True when trailing punctuation was trimmed, which ends a name run.
    pub trailing_punct: bool,
}

pub fn words(text: &str) -> Vec<Word<'_>> {
    fn push<'a>(text: &'a str, start_byte: usize, start_char: usize, end_byte: usize, out: &mut Vec<Word<'a>>) {
        let raw = &text[start_byte..end_byte];
        let lead = raw.chars().take_while(|c| !c.is_alphanumeric()).count();
        let lead_bytes = raw.char_indices().nth(lead).map_or(raw.len(), |(b, _)| b);
        let trimmed_lead = &raw[lead_bytes..];
        let core = trimmed_lead.trim_end_matches(|c: char| !c.is_alphanumeric());
        if core.is_empty() {
            return;
        }
        let start = start_char + lead;
        out.push(Word {
            text: core,
            char_start: start,
            char_end: start + core.chars().count(),
            trailing_punct: core.len() < trimmed_lead.len(),
        });
    }

    let mut out = Vec::new();
    let mut current: Option<(usize, usize)> = None; // (byte start, char start)
    for (char_idx, (byte, c)) in text.char_indices().enumerate() {
        if c.is_whitespace() {
            if let Some((sb, sc)) = current.take() {
                push(text, sb, sc, byte, &mut out);
            }
        } else if current.is_none() {
            current = Some((byte, char_idx));
        }
    }
    if let Some((sb, sc)) = current {
        push(text, sb, sc, text.len(), &mut out);
    }
    out
}

fn is_numeric(word: &str) -> bool {
    word.chars().next().is_some_and(|c| c.is_ascii_digit())
        && word.chars().all(|c| c.is_ascii_digit() || c == ',' || c == '.')
}

fn is_capitalized(word: &str) -> bool {
    word.chars().next().is_some_and(char::is_uppercase)
}

/// Maximal runs of capitalized words plus standalone numbers, scored by run
/// length, best first (ties by position), capped at [`MAX_MOCK_CANDIDATES`].
pub fn heuristic_candidates(passage: &str) -> Vec<(AnswerSpan, f64)> {
    let ws = words(passage);
    let byte_of: Vec<usize> = passage.char_indices().map(|(b, _)| b).chain([passage.len()]).collect();
    let mut found: Vec<(AnswerSpan, f64)> = Vec::new();
    let mut run: Option<(usize, usize, usize)> = None; // (char_start, char_end, len)
    let flush = |run: &mut Option<(usize, usize, usize)>, found: &mut Vec<(AnswerSpan, f64)>| {
        if let Some((s, e, len)) = run.take() {
            found.push((AnswerSpan::new(&passage[byte_of[s]..byte_of[e]], s), len as f64));
        }
    };
    for w in &ws {
        if is_numeric(w.text) {
            flush(&mut run, &mut found);
            found.push((AnswerSpan::new(w.text, w.char_start), 1.0));
        } else if is_capitalized(w.text) {
            run = Some(match run {
                Some((s, _, len)) => (s, w.char_end, len + 1),
                None => (w.char_start, w.char_end, 1),
            });
            if w.trailing_punct {
                flush(&mut run, &mut found);
            }
        } else {
            flush(&mut run, &mut found);
        }
    }
    flush(&mut run, &mut found);
    let mut seen = std::collections::HashSet::new();
    found.retain(|(s, _)| seen.insert(s.clone()));
    found.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.char_start.cmp(&b.0.char_start)));
    found.truncate(MAX_MOCK_CANDIDATES);
    found
}

fn type_words(answer: &str) -> [&'static str; 4] {
    if answer.chars().any(|c| c.is_ascii_digit()) {
        ["year", "number", "amount", "date"]
    } else if is_capitalized(answer) {
        ["name", "person", "place", "title"]
    } else {
        ["thing", "term", "detail", "phrase"]
    }
}

/// Template question generator. Question `i` is
/// `What is <k words left of the answer> <type word>?` where `k` cycles
/// through 1..=6 (bounded by the available context) and the type word
/// rotates every full cycle of `k`.
#[derive(Debug)]
pub struct MockGenerator {
    id: String,
    seed: u64,
    requests: Mutex<Vec<GenerateRequest>>,
}

impl MockGenerator {
    pub fn new(id: impl Into<String>, seed: u64) -> Self {
        MockGenerator { id: id.into(), seed, requests: Mutex::new(Vec::new()) }
    }

    /// Every request received so far, verbatim.
    pub fn requests(&self) -> Vec<GenerateRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn questions_for(&self, req: &GenerateRequest) -> Vec<WireQuestion> {
        let context: Vec<&str> = words(&req.passage)
            .into_iter()
            .filter(|w| w.char_end <= req.answer.char_start)
            .map(|w| w.text)
            .collect();
        let max_k = context.len().min(MAX_CONTEXT_WORDS);
        let types = type_words(&req.answer.text);
        let start = &req.answer.char_start.to_string();
        let offset = seed::derive(self.seed, &[&self.id, "type", &req.passage_id, start]) as usize;
        (0..req.n)
            .map(|i| {
                let (k, cycle) = if max_k == 0 { (0, i) } else { (1 + i % max_k, i / max_k) };
                let ty = types[(offset + cycle) % types.len()];
                let question = if k == 0 {
                    format!("{QUESTION_PREFIX}{ty}?")
                } else {
                    format!("{QUESTION_PREFIX}{} {ty}?", context[context.len() - k..].join(" "))
                };
                let u = seed::open_unit(
                    self.seed,
                    &[&self.id, "ll", &req.passage_id, start, &req.answer.text, &question],
                );
                WireQuestion { question, log_likelihood: -5.0 * u }
            })
            .collect()
    }
}

impl QuestionGenerator for MockGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        self.requests.lock().unwrap().push(request.clone());
        Ok(GenerateResponse { questions: self.questions_for(request) })
    }
}

/// QA adversary with a tunable hit rate.
///
/// The model's belief for a question is the registered span if one exists,
/// otherwise the first candidate after the context words of a template
/// question. With probability `skill` (seeded per passage and question) it
/// returns the belief with confidence in `[0.7, 1)`. Otherwise it returns a
/// seeded candidate other than the belief with confidence in `(0, 0.5]`.
#[derive(Debug)]
pub struct MockQa {
    seed: u64,
    skill: f64,
    beliefs: Mutex<HashMap<(String, String), AnswerSpan>>,
}

impl MockQa {
    pub fn new(seed: u64, skill: f64) -> Self {
        MockQa { seed, skill: skill.clamp(0.0, 1.0), beliefs: Mutex::new(HashMap::new()) }
    }

    pub fn skill(&self) -> f64 {
        self.skill
    }

    /// Sets the span the model believes answers `question` on a passage.
    pub fn register_gold(&self, passage_id: &str, question: &str, span: AnswerSpan) {
        self.beliefs
            .lock()
            .unwrap()
            .insert((passage_id.to_owned(), normalize(question).joined()), span);
    }

    fn belief(&self, req: &QaRequest, candidates: &[(AnswerSpan, f64)]) -> Option<AnswerSpan> {
        let key = (req.passage_id.clone(), normalize(&req.question).joined());
        if let Some(span) = self.beliefs.lock().unwrap().get(&key) {
            return Some(span.clone());
        }
        locate_template_answer(&req.passage, &req.question, candidates)
    }

    pub fn predict(&self, req: &QaRequest) -> QaResponse {
        let candidates = heuristic_candidates(&req.passage);
        let belief = self.belief(req, &candidates);
        let hit = seed::unit(self.seed, &["qa_hit", &req.passage_id, &req.question]) < self.skill;
        if let (true, Some(span)) = (hit, &belief) {
            let u = seed::unit(self.seed, &["qa_conf", &req.passage_id, &req.question]);
            return QaResponse { answer: span.clone(), confidence: 0.7 + 0.3 * u };
        }
        let mut pool: Vec<AnswerSpan> = candidates
            .into_iter()
            .map(|(s, _)| s)
            .filter(|s| Some(s) != belief.as_ref())
            .collect();
        if pool.is_empty() {
            pool = words(&req.passage)
                .iter()
                .map(|w| AnswerSpan::new(w.text, w.char_start))
                .filter(|s| Some(s) != belief.as_ref())
                .collect();
        }
        let answer = if pool.is_empty() {
            belief.unwrap_or_else(|| AnswerSpan::new("", 0))
        } else {
            let mut rng = seed::rng(self.seed, &["qa_miss", &req.passage_id, &req.question]);
            pool.swap_remove(rng.random_range(0..pool.len()))
        };
        let u = seed::open_unit(self.seed, &["qa_miss_conf", &req.passage_id, &req.question]);
        QaResponse { answer, confidence: 0.5 * u }
    }
}

/// Inverts the mock generator's template: finds the context words in the
/// passage and returns the first candidate starting at or after them.
fn locate_template_answer(
    passage: &str,
    question: &str,
    candidates: &[(AnswerSpan, f64)],
) -> Option<AnswerSpan> {
    let body = question.strip_prefix(QUESTION_PREFIX)?.strip_suffix('?')?;
    let mut parts: Vec<&str> = body.split(' ').collect();
    parts.pop(); // type word
    if parts.is_empty() {
        return None;
    }
    let ws = words(passage);
    let end = ws.windows(parts.len()).find_map(|win| {
        win.iter().zip(&parts).all(|(w, p)| w.text == *p).then(|| win[win.len() - 1].char_end)
    })?;
    candidates
        .iter()
        .map(|(s, _)| s)
        .filter(|s| s.char_start >= end)
        .min_by_key(|s| s.char_start)
        .cloned()
}

impl QaModel for MockQa {
    fn answer(&self, request: &QaRequest) -> Result<QaResponse, BackendError> {
        Ok(self.predict(request))
    }
}

/// Capitalized-run and number extractor.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockCandidates;

impl CandidateExtractor for MockCandidates {
    fn candidates(&self, request: &CandidatesRequest) -> Result<CandidatesResponse, BackendError> {
        let candidates = heuristic_candidates(&request.passage)
            .into_iter()
            .take(request.max)
            .map(|(s, score)| WireCandidate { text: s.text, char_start: s.char_start, score })
            .collect();
        Ok(CandidatesResponse { candidates })
    }
}

/// A backend that is always down.
#[derive(Debug, Default, Clone)]
pub struct Offline;

impl Offline {
    fn err() -> BackendError {
        BackendError::Transport {
            endpoint: "offline".into(),
            attempts: 1,
            message: "connection refused".into(),
        }
    }
}

impl QuestionGenerator for Offline {
    fn id(&self) -> &str {
        "offline"
    }
    fn generate(&self, _: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        Err(Self::err())
    }
}

impl QaModel for Offline {
    fn answer(&self, _: &QaRequest) -> Result<QaResponse, BackendError> {
        Err(Self::err())
    }
}

impl CandidateExtractor for Offline {
    fn candidates(&self, _: &CandidatesRequest) -> Result<CandidatesResponse, BackendError> {
        Err(Self::err())
    }
}
