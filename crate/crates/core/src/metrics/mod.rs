//! Deterministic lexical metrics.
//!
//! Text is normalized into a bag of unigrams (lowercased, split on
//! non-alphanumeric characters, stopwords removed, Porter-stemmed). Overlap
//! between bags uses clipped multiset counts. All scores are fractions in
//! `[0, 1]`.

pub mod porter;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::types::{Document, DEFAULT_NO_ANSWER_TEXT};

/// The shipped stopword list.
pub const DEFAULT_STOPWORDS: &str = include_str!("../../data/stopwords_en.txt");

/// Multiset of normalized unigrams.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenBag {
    counts: BTreeMap<String, usize>,
    total: usize,
}

impl TokenBag {
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut bag = TokenBag::default();
        for t in tokens {
            *bag.counts.entry(t.into()).or_insert(0) += 1;
            bag.total += 1;
        }
        bag
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn count(&self, token: &str) -> usize {
        self.counts.get(token).copied().unwrap_or(0)
    }

    /// Distinct tokens with their multiplicities, in lexical order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.counts.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Clipped multiset intersection size.
    pub fn overlap(&self, other: &TokenBag) -> usize {
        self.counts
            .iter()
            .map(|(t, &c)| c.min(other.count(t)))
            .sum()
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Text normalizer parameterized by a stopword list.
#[derive(Debug, Clone)]
pub struct Normalizer {
    stopwords: HashSet<String>,
}

impl Normalizer {
    /// Parses a stopword list: one token per line, `#` starts a comment line.
    pub fn from_stopword_list(list: &str) -> Self {
        let stopwords = list
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Normalizer { stopwords }
    }

    pub fn from_stopword_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::from_stopword_list(&std::fs::read_to_string(path)?))
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    /// Stopwords are filtered before and after stemming, so no stem in the
    /// bag collides with a stopword.
    pub fn normalize(&self, text: &str) -> TokenBag {
        TokenBag::from_tokens(
            tokenize(text)
                .into_iter()
                .filter(|t| !self.is_stopword(t))
                .map(|t| porter::stem(&t))
                .filter(|t| !t.is_empty() && !self.is_stopword(t)),
        )
    }
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::from_stopword_list(DEFAULT_STOPWORDS)
    }
}

fn default_normalizer() -> &'static Normalizer {
    static N: OnceLock<Normalizer> = OnceLock::new();
    N.get_or_init(Normalizer::default)
}

/// Normalizes with the shipped stopword list.
pub fn normalize(text: &str) -> TokenBag {
    default_normalizer().normalize(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Unigram precision, recall and F1 of `candidate` against `reference`.
pub fn unigram_prf(candidate: &TokenBag, reference: &TokenBag) -> Prf {
    let overlap = candidate.overlap(reference) as f64;
    let precision = if candidate.is_empty() { 0.0 } else { overlap / candidate.len() as f64 };
    let recall = if reference.is_empty() { 0.0 } else { overlap / reference.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub precision: f64,
    /// The answer had no contentful tokens; precision is reported as 1.
    pub empty_after_normalization: bool,
}

/// Lexical precision of an answer against its grounding document.
pub fn faithfulness_precision(answer: &str, doc: &Document) -> Faithfulness {
    faithfulness_with(default_normalizer(), answer, &default_normalizer().normalize(&doc.text))
}

/// As [`faithfulness_precision`] with an explicit normalizer and a
/// pre-normalized document.
pub fn faithfulness_with(norm: &Normalizer, answer: &str, doc_bag: &TokenBag) -> Faithfulness {
    let bag = norm.normalize(answer);
    if bag.is_empty() {
        return Faithfulness {
            precision: 1.0,
            empty_after_normalization: true,
        };
    }
    Faithfulness {
        precision: unigram_prf(&bag, doc_bag).precision,
        empty_after_normalization: false,
    }
}

/// Case-insensitive exact-match patterns identifying no-answer responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoAnswerPatterns(pub Vec<String>);

impl NoAnswerPatterns {
    /// `CANNOTANSWER` plus any extra phrases (e.g. an algorithm's no-answer text).
    pub fn with_extra<S: AsRef<str>>(extra: impl IntoIterator<Item = S>) -> Self {
        let mut v = vec![DEFAULT_NO_ANSWER_TEXT.to_string()];
        for e in extra {
            let e = e.as_ref().trim().to_string();
            if !e.is_empty() && !v.iter().any(|p| p.to_lowercase() == e.to_lowercase()) {
                v.push(e);
            }
        }
        NoAnswerPatterns(v)
    }

    pub fn matches(&self, text: &str) -> bool {
        is_no_answer(text, &self.0)
    }
}

impl Default for NoAnswerPatterns {
    fn default() -> Self {
        NoAnswerPatterns(vec![DEFAULT_NO_ANSWER_TEXT.to_string()])
    }
}

/// True iff the trimmed text equals one of `patterns`, ignoring case.
pub fn is_no_answer<S: AsRef<str>>(text: &str, patterns: &[S]) -> bool {
    let t = text.trim().to_lowercase();
    patterns.iter().any(|p| p.as_ref().trim().to_lowercase() == t)
}

fn squash(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// True iff the answer, whitespace-collapsed and lowercased, occurs verbatim
/// in the equally normalized document without splitting a word at either end.
pub fn is_fully_extracted(answer: &str, doc: &Document) -> bool {
    let needle = squash(answer);
    if needle.is_empty() {
        return false;
    }
    let hay = squash(&doc.text);
    let first_alnum = needle.chars().next().is_some_and(char::is_alphanumeric);
    let last_alnum = needle.chars().next_back().is_some_and(char::is_alphanumeric);
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = !first_alnum || !hay[..start].chars().next_back().is_some_and(char::is_alphanumeric);
        let after_ok = !last_alnum || !hay[end..].chars().next().is_some_and(char::is_alphanumeric);
        if before_ok && after_ok {
            return true;
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// `2ab / (a + b)`, or 0 when `a + b = 0`. Units of `a` and `b` must match.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// One scored turn: its reference class, its class-specific F1 and whether
/// the candidate's answer/no-answer behaviour matched the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredTurn {
    pub reference_is_no_answer: bool,
    pub f1: f64,
    pub class_correct: bool,
}

/// Per-class F1 and classification accuracy with their harmonic means.
/// A class with no turns has no score (`None`); the harmonic mean then
/// falls back to the other class alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub f1_answerable: Option<f64>,
    pub f1_unanswerable: Option<f64>,
    pub f1_hm: f64,
    pub cls_acc_a: Option<f64>,
    pub cls_acc_ua: Option<f64>,
    pub cls_acc_hm: f64,
    pub n_a: usize,
    pub n_ua: usize,
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Harmonic mean over the classes that have a score.
pub fn class_hm(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => harmonic_mean(a, b),
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => 0.0,
    }
}

impl ClassScores {
    pub fn aggregate<'a>(turns: impl IntoIterator<Item = &'a ScoredTurn>) -> Self {
        let (mut f1_a, mut f1_ua, mut ok_a, mut ok_ua, mut n_a, mut n_ua) = (0.0, 0.0, 0usize, 0usize, 0usize, 0usize);
        for t in turns {
            if t.reference_is_no_answer {
                n_ua += 1;
                f1_ua += t.f1;
                ok_ua += usize::from(t.class_correct);
            } else {
                n_a += 1;
                f1_a += t.f1;
                ok_a += usize::from(t.class_correct);
            }
        }
        let f1_answerable = mean(f1_a, n_a);
        let f1_unanswerable = mean(f1_ua, n_ua);
        let cls_acc_a = mean(ok_a as f64, n_a);
        let cls_acc_ua = mean(ok_ua as f64, n_ua);
        ClassScores {
            f1_answerable,
            f1_unanswerable,
            f1_hm: class_hm(f1_answerable, f1_unanswerable),
            cls_acc_a,
            cls_acc_ua,
            cls_acc_hm: class_hm(cls_acc_a, cls_acc_ua),
            n_a,
            n_ua,
        }
    }
}
