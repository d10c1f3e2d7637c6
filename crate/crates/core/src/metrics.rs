//! Benchmark scoring: text normalization, exact/partial match, accuracy,
//! BLEU-1, ROUGE-L, embedding similarity, and bootstrap uncertainty.
//!
//! Free-text metrics are computed per item and averaged per report cell.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::qa::{Combo, Level, QAItem, QType, Task};
use crate::seed;

/// Default number of bootstrap resamples.
pub const DEFAULT_BOOTSTRAP: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("bootstrap needs at least one score")]
    EmptyScores,
    #[error("bootstrap needs at least one resample")]
    NoResamples,
    #[error("prediction refers to unknown question id {0:?}")]
    UnknownQuestion(String),
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("embedding provider returned {got} vectors of mismatched size for {expected} texts")]
    ProviderShape { expected: usize, got: usize },
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
}

/// Case-folds, turns every non-alphanumeric character into a space, and
/// collapses whitespace.
pub fn normalize(text: &str) -> String {
    let mapped: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(str::to_string).collect()
}

/// 1 when the normalized strings are equal.
pub fn exact_match(pred: &str, gold: &str) -> f64 {
    f64::from(u8::from(normalize(pred) == normalize(gold)))
}

/// 1 when the normalized gold answer is a substring of the normalized
/// prediction. An empty gold answer matches nothing.
pub fn partial_match(pred: &str, gold: &str) -> f64 {
    let gold = normalize(gold);
    if gold.is_empty() {
        return 0.0;
    }
    f64::from(u8::from(normalize(pred).contains(&gold)))
}

/// Clipped unigram precision times the brevity penalty.
pub fn bleu1(pred: &str, gold: &str) -> f64 {
    let p = tokens(pred);
    let g = tokens(gold);
    if p.is_empty() {
        return 0.0;
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *gold_counts.entry(t).or_default() += 1;
    }
    let mut pred_counts: HashMap<&str, usize> = HashMap::new();
    for t in &p {
        *pred_counts.entry(t).or_default() += 1;
    }
    let clipped: usize = pred_counts
        .iter()
        .map(|(t, c)| (*c).min(gold_counts.get(t).copied().unwrap_or(0)))
        .sum();
    let precision = clipped as f64 / p.len() as f64;
    let bp = (1.0 - g.len() as f64 / p.len() as f64).min(0.0).exp();
    precision * bp
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 over normalized tokens.
pub fn rouge_l(pred: &str, gold: &str) -> f64 {
    let p = tokens(pred);
    let g = tokens(gold);
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &g) as f64;
    let precision = lcs / p.len() as f64;
    let recall = lcs / g.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Maps texts to vectors. All vectors of one call share a dimension.
pub trait EmbeddingProvider {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, MetricError>;
}

/// Term-count vectors over the normalized vocabulary of each batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct BagOfWords;

impl EmbeddingProvider for BagOfWords {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, MetricError> {
        let toks: Vec<Vec<String>> = texts.iter().map(|t| tokens(t)).collect();
        let mut vocab: BTreeMap<&str, usize> = BTreeMap::new();
        for t in toks.iter().flatten() {
            let next = vocab.len();
            vocab.entry(t).or_insert(next);
        }
        Ok(toks
            .iter()
            .map(|ts| {
                let mut v = vec![0.0; vocab.len()];
                for t in ts {
                    v[vocab[t.as_str()]] += 1.0;
                }
                v
            })
            .collect())
    }
}

/// Cosine similarity of the two embeddings; 0 if either is the zero vector.
pub fn semantic_sim(pred: &str, gold: &str, provider: &dyn EmbeddingProvider) -> Result<f64, MetricError> {
    let vs = provider.embed_batch(&[pred, gold])?;
    if vs.len() != 2 || vs[0].len() != vs[1].len() {
        return Err(MetricError::ProviderShape { expected: 2, got: vs.len() });
    }
    let dot: f64 = vs[0].iter().zip(&vs[1]).map(|(a, b)| a * b).sum();
    let na = vs[0].iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = vs[1].iter().map(|a| a * a).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean of `scores` and the population standard deviation of `b` resampled means.
///
/// Scores are sorted before resampling so the result depends only on the
/// multiset of scores and the seed.
pub fn bootstrap_std(scores: &[f64], b: usize, seed: u64) -> Result<(f64, f64), MetricError> {
    if scores.is_empty() {
        return Err(MetricError::EmptyScores);
    }
    if b == 0 {
        return Err(MetricError::NoResamples);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if sorted[0] == sorted[n - 1] {
        // every resample is the same constant
        return Ok((sorted[0], 0.0));
    }
    let mean = sorted.iter().sum::<f64>() / n as f64;

    let mut rng = seed::rng(seed);
    let means: Vec<f64> = (0..b)
        .map(|_| (0..n).map(|_| sorted[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let center = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - center).powi(2)).sum::<f64>() / b as f64;
    Ok((mean, var.sqrt()))
}

/// Metric names as they appear in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "accuracy")]
    Accuracy,
    #[serde(rename = "ematch")]
    ExactMatch,
    #[serde(rename = "pmatch")]
    PartialMatch,
    #[serde(rename = "bleu1")]
    Bleu1,
    #[serde(rename = "rouge_l")]
    RougeL,
    #[serde(rename = "sim")]
    Similarity,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::ExactMatch => "ematch",
            Metric::PartialMatch => "pmatch",
            Metric::Bleu1 => "bleu1",
            Metric::RougeL => "rouge_l",
            Metric::Similarity => "sim",
        }
    }

    /// Metrics reported for a question type.
    pub fn for_qtype(q: QType) -> &'static [Metric] {
        match q {
            QType::TrueFalse | QType::Mcq => &[Metric::Accuracy],
            QType::FillBlank => &[Metric::ExactMatch, Metric::PartialMatch],
            QType::Open => &[Metric::Bleu1, Metric::RougeL, Metric::Similarity],
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

/// One prediction paired with its question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub qa_id: String,
    pub prediction: String,
    pub gold: String,
    pub qtype: QType,
    pub task: Task,
    pub level: Level,
    #[serde(default)]
    pub options: Vec<String>,
}

/// A line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub qa_id: String,
    pub prediction: String,
}

/// Pairs predictions with their questions. Unknown ids are errors; questions
/// without a prediction are skipped.
pub fn join_predictions(items: &[QAItem], preds: &[Prediction]) -> Result<Vec<EvalRecord>, MetricError> {
    let by_id: HashMap<&str, &QAItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    preds
        .iter()
        .map(|p| {
            let item = by_id
                .get(p.qa_id.as_str())
                .ok_or_else(|| MetricError::UnknownQuestion(p.qa_id.clone()))?;
            Ok(EvalRecord {
                qa_id: p.qa_id.clone(),
                prediction: p.prediction.clone(),
                gold: item.answer.clone(),
                qtype: item.qtype,
                task: item.task,
                level: item.level,
                options: item.options.clone(),
            })
        })
        .collect()
}

/// Leading option letter such as `B`, `B.`, `B)`, `(B)`, or `B: text`.
fn option_letter(pred: &str) -> Option<usize> {
    let t = pred.trim();
    let t = t.strip_prefix('(').unwrap_or(t);
    let mut chars = t.chars();
    let letter = chars.next()?;
    if !letter.is_ascii_alphabetic() {
        return None;
    }
    match chars.next() {
        None | Some(')' | '.' | ':') => Some(usize::from(letter.to_ascii_uppercase() as u8 - b'A')),
        _ => None,
    }
}

/// Resolves an MCQ prediction to option text: exact normalized option text
/// first, then a leading option letter. Otherwise the prediction is returned as is.
pub fn resolve_mcq<'a>(pred: &'a str, options: &'a [String]) -> &'a str {
    let norm = normalize(pred);
    if let Some(o) = options.iter().find(|o| normalize(o) == norm) {
        return o;
    }
    match option_letter(pred) {
        Some(i) if i < options.len() => &options[i],
        _ => pred,
    }
}

/// Per-item metric values for one record.
pub fn score_record(r: &EvalRecord, provider: &dyn EmbeddingProvider) -> Result<Vec<(Metric, f64)>, MetricError> {
    Ok(match r.qtype {
        QType::TrueFalse => vec![(Metric::Accuracy, exact_match(&r.prediction, &r.gold))],
        QType::Mcq => vec![(Metric::Accuracy, exact_match(resolve_mcq(&r.prediction, &r.options), &r.gold))],
        QType::FillBlank => vec![
            (Metric::ExactMatch, exact_match(&r.prediction, &r.gold)),
            (Metric::PartialMatch, partial_match(&r.prediction, &r.gold)),
        ],
        QType::Open => vec![
            (Metric::Bleu1, bleu1(&r.prediction, &r.gold)),
            (Metric::RougeL, rouge_l(&r.prediction, &r.gold)),
            (Metric::Similarity, semantic_sim(&r.prediction, &r.gold, provider)?),
        ],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Aggregates per `(level, task, qtype)` cell and metric.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub cells: BTreeMap<Combo, BTreeMap<Metric, MetricCell>>,
}

impl MetricReport {
    pub fn get(&self, combo: &Combo, metric: Metric) -> Option<&MetricCell> {
        self.cells.get(combo)?.get(&metric)
    }

    /// CSV with columns `level,task,qtype,metric,mean,std,n`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), MetricError> {
        writeln!(w, "level,task,qtype,metric,mean,std,n")?;
        for (combo, metrics) in &self.cells {
            for (m, c) in metrics {
                writeln!(
                    w,
                    "{},{},{},{},{:.6},{:.6},{}",
                    combo.level, combo.task, combo.qtype, m, c.mean, c.std, c.n
                )?;
            }
        }
        Ok(())
    }
}

/// Scores every record with the bag-of-words similarity provider.
pub fn evaluate(records: &[EvalRecord], b: usize, seed: u64) -> Result<MetricReport, MetricError> {
    evaluate_with(records, b, seed, &BagOfWords)
}

/// Scores every record and bootstraps each cell with a seed derived from
/// `(seed, cell, metric)`, so results do not depend on record order.
pub fn evaluate_with(
    records: &[EvalRecord],
    b: usize,
    seed: u64,
    provider: &dyn EmbeddingProvider,
) -> Result<MetricReport, MetricError> {
    let mut scores: BTreeMap<Combo, BTreeMap<Metric, Vec<f64>>> = BTreeMap::new();
    for r in records {
        let cell = scores.entry(Combo::new(r.level, r.task, r.qtype)).or_default();
        for (m, v) in score_record(r, provider)? {
            cell.entry(m).or_default().push(v);
        }
    }
    let mut report = MetricReport::default();
    for (combo, metrics) in scores {
        let mut out = BTreeMap::new();
        for (m, vals) in metrics {
            let (mean, std) = bootstrap_std(&vals, b, seed::derive_seed(seed, &format!("{combo}/{m}")))?;
            out.insert(m, MetricCell { mean, std, n: vals.len() });
        }
        report.cells.insert(combo, out);
    }
    Ok(report)
}
