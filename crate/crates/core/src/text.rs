//! Text normalization, n-grams and word-overlap F1.
//!
//! Normalization follows the usual extractive-QA scorer convention: lowercase,
//! delete every character in the Unicode punctuation categories (`P*`), split
//! on whitespace and drop the articles `a`, `an` and `the`.

use std::collections::{HashMap, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::PreconditionError;

static PUNCTUATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}").unwrap());

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Ordered normalized tokens.
///
/// Tokens are never empty, never contain whitespace or punctuation and are
/// never an English article.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct NormalizedText {
    tokens: Vec<String>,
}

impl NormalizedText {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by single spaces. Because no token holds whitespace
    /// this is injective.
    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }
}

pub fn normalize(text: &str) -> NormalizedText {
    let lowered = text.to_lowercase();
    let stripped = PUNCTUATION.replace_all(&lowered, "");
    let tokens = stripped
        .split_whitespace()
        .filter(|tok| !ARTICLES.contains(tok))
        .map(str::to_owned)
        .collect();
    NormalizedText { tokens }
}

/// Precision, recall and their harmonic mean over normalized token bags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub value: f64,
    pub precision: f64,
    pub recall: f64,
}

impl F1Score {
    pub const ZERO: F1Score = F1Score { value: 0.0, precision: 0.0, recall: 0.0 };
    pub const ONE: F1Score = F1Score { value: 1.0, precision: 1.0, recall: 1.0 };

    fn from_counts(common: usize, predicted: usize, gold: usize) -> F1Score {
        if common == 0 {
            return F1Score::ZERO;
        }
        let precision = common as f64 / predicted as f64;
        let recall = common as f64 / gold as f64;
        F1Score { value: 2.0 * precision * recall / (precision + recall), precision, recall }
    }
}

/// Word-overlap F1 on the multiset intersection of normalized tokens.
///
/// Both sides empty after normalization scores 1; exactly one side empty
/// scores 0.
pub fn f1_overlap(prediction: &str, gold: &str) -> F1Score {
    let pred = normalize(prediction);
    let gold = normalize(gold);
    f1_tokens(pred.tokens(), gold.tokens())
}

/// F1 over already-normalized token bags.
pub fn f1_tokens<S: AsRef<str>>(prediction: &[S], gold: &[S]) -> F1Score {
    match (prediction.is_empty(), gold.is_empty()) {
        (true, true) => return F1Score::ONE,
        (true, false) | (false, true) => return F1Score::ZERO,
        _ => {}
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for tok in gold {
        *gold_counts.entry(tok.as_ref()).or_default() += 1;
    }
    let mut common = 0;
    for tok in prediction {
        if let Some(count) = gold_counts.get_mut(tok.as_ref()) {
            if *count > 0 {
                *count -= 1;
                common += 1;
            }
        }
    }
    F1Score::from_counts(common, prediction.len(), gold.len())
}

/// Best F1 of `prediction` against any of `golds`; the first maximum wins.
pub fn max_f1_over_golds<S: AsRef<str>>(
    prediction: &str,
    golds: &[S],
) -> Result<F1Score, PreconditionError> {
    if golds.is_empty() {
        return Err(PreconditionError::new("max_f1_over_golds requires at least one gold answer"));
    }
    let pred = normalize(prediction);
    let mut best: Option<F1Score> = None;
    for gold in golds {
        let score = f1_tokens(pred.tokens(), normalize(gold.as_ref()).tokens());
        if best.is_none_or(|b| score.value > b.value) {
            best = Some(score);
        }
    }
    Ok(best.expect("golds is non-empty"))
}

/// Distinct contiguous windows of length `n`.
pub fn ngrams<S: Eq + std::hash::Hash>(tokens: &[S], n: usize) -> Result<HashSet<&[S]>, PreconditionError> {
    if n == 0 {
        return Err(PreconditionError::new("n-gram length must be at least 1"));
    }
    Ok(tokens.windows(n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(t: &NormalizedText) -> Vec<&str> {
        t.tokens().iter().map(String::as_str).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(toks(&normalize("The Red Car!")), ["red", "car"]);
        assert!(normalize("").is_empty());
        assert!(normalize("A an THE").is_empty());
        assert_eq!(toks(&normalize("don't  stop—believing")), ["dont", "stopbelieving"]);
        assert_eq!(toks(&normalize("«Théâtre» ¿qué?")), ["théâtre", "qué"]);
    }

    #[test]
    fn symbols_are_not_punctuation() {
        // `$` and `+` are Sc / Sm, not P*.
        assert_eq!(toks(&normalize("$5 + 3")), ["$5", "+", "3"]);
    }

    #[test]
    fn f1_examples() {
        let s = f1_overlap("big red car", "red car");
        assert!((s.value - 0.8).abs() < 1e-12);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 1.0);
        assert_eq!(f1_overlap("dog", "cat").value, 0.0);
        assert_eq!(f1_overlap("Paris", "Paris").value, 1.0);
    }

    #[test]
    fn f1_empty_sides() {
        assert_eq!(f1_overlap("the", "a"), F1Score::ONE);
        assert_eq!(f1_overlap("", "word"), F1Score::ZERO);
        assert_eq!(f1_overlap("word", "!!"), F1Score::ZERO);
    }

    #[test]
    fn f1_counts_multiplicity() {
        // pred {x,x,y}, gold {x,y,y}: common = 2
        let s = f1_overlap("x x y", "x y y");
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn max_f1_examples() {
        assert_eq!(max_f1_over_golds("red car", &["blue car", "red car"]).unwrap().value, 1.0);
        assert!((max_f1_over_golds("big red car", &["red car"]).unwrap().value - 0.8).abs() < 1e-12);
        assert_eq!(max_f1_over_golds("x", &["y", "z"]).unwrap().value, 0.0);
        assert!(max_f1_over_golds::<&str>("x", &[]).is_err());
    }

    #[test]
    fn max_f1_first_maximum_wins() {
        // Both golds score 0.8 but with swapped precision/recall.
        let best = max_f1_over_golds("red car", &["big red car", "red"]).unwrap();
        assert!((best.recall - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ngram_examples() {
        let t = ["a", "b", "c", "d"];
        let g = ngrams(&t, 3).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.contains(&["a", "b", "c"][..]));
        assert!(g.contains(&["b", "c", "d"][..]));
        assert!(ngrams(&["a", "b"], 8).unwrap().is_empty());
        assert_eq!(ngrams(&["a", "a", "a"], 2).unwrap().len(), 1);
        assert!(ngrams(&["a"], 0).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once.joined()), once.clone());
            for tok in once.tokens() {
                prop_assert!(!tok.is_empty());
                prop_assert!(!tok.chars().any(char::is_whitespace));
                prop_assert!(!ARTICLES.contains(&tok.as_str()));
                prop_assert!(!PUNCTUATION.is_match(tok));
            }
        }

        #[test]
        fn self_f1_is_one(s in "[a-zA-Z ,.]{0,30}") {
            if !normalize(&s).is_empty() {
                prop_assert_eq!(f1_overlap(&s, &s).value, 1.0);
            }
        }

        #[test]
        fn f1_bounded_and_swaps(a in "[a-e ]{0,20}", b in "[a-e ]{0,20}") {
            let ab = f1_overlap(&a, &b);
            let ba = f1_overlap(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab.value));
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.recall, ba.precision);
        }

        #[test]
        fn ngram_count_bound(len in 0usize..12, n in 1usize..6) {
            let t: Vec<usize> = (0..len).map(|i| i % 3).collect();
            let g = ngrams(&t, n).unwrap();
            prop_assert!(g.len() <= (len + 1).saturating_sub(n));
            for w in g {
                prop_assert_eq!(w.len(), n);
            }
        }
    }
}
