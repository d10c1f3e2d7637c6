use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;

use super::{QAItem, QType, MAX_FILL_BLANK_WORDS};
use crate::metrics::normalize;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// The answer text appears verbatim in the question.
    AnswerLeak,
    /// Fill-in-the-blank answer is too long.
    Length,
    DuplicateOptions,
    EmptyAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

/// Rejection rules applied to every synthesized item.
pub fn qa_quality_filter(item: &QAItem) -> Verdict {
    let answer = normalize(&item.answer);
    if answer.is_empty() {
        return Verdict::Reject(RejectReason::EmptyAnswer);
    }
    // whole-token containment on normalized text
    let question = format!(" {} ", normalize(&item.question));
    if question.contains(&format!(" {answer} ")) {
        return Verdict::Reject(RejectReason::AnswerLeak);
    }
    if item.qtype == QType::FillBlank && item.answer.split_whitespace().count() >= MAX_FILL_BLANK_WORDS {
        return Verdict::Reject(RejectReason::Length);
    }
    if item.qtype == QType::Mcq {
        let mut seen = BTreeSet::new();
        if !item.options.iter().all(|o| seen.insert(normalize(o))) {
            return Verdict::Reject(RejectReason::DuplicateOptions);
        }
    }
    Verdict::Accept
}

/// Seeded permutation of `options`.
pub fn shuffle_options<T: Clone>(options: &[T], seed: u64) -> Vec<T> {
    let mut out = options.to_vec();
    out.shuffle(&mut seed::scoped_rng(seed, "mcq-options"));
    out
}

fn token_set(text: &str) -> BTreeSet<String> {
    normalize(text).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Greedy near-duplicate removal in input order.
///
/// An item is dropped when the token-set Jaccard similarity between its
/// question and a retained question about the same image reaches
/// `sim_threshold`.
pub fn dedupe(items: &[QAItem], sim_threshold: f64) -> Vec<QAItem> {
    let mut kept: Vec<QAItem> = Vec::new();
    let mut by_image: HashMap<&str, Vec<BTreeSet<String>>> = HashMap::new();
    for item in items {
        let tokens = token_set(&item.question);
        let seen = by_image.entry(item.image_ref.as_str()).or_default();
        if seen.iter().any(|s| jaccard(s, &tokens) >= sim_threshold) {
            continue;
        }
        seen.push(tokens);
        kept.push(item.clone());
    }
    kept
}
