//! ROUGE, BLEU, token-level P/R/F1 and classification scores.
//!
//! Text metrics work on normalised word tokens (see
//! [`crate::tokenizer::normalize`]), never on subword pieces.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::normalize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }

    const PERFECT: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };
    const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn counts<T: Eq + Hash>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for x in items {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

/// Size of the multiset intersection.
fn overlap<T: Eq + Hash>(a: &HashMap<T, usize>, b: &HashMap<T, usize>) -> usize {
    a.iter().map(|(k, &c)| c.min(b.get(k).copied().unwrap_or(0))).sum()
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> Vec<Vec<&str>> {
    if n == 0 || tokens.len() < n {
        return Vec::new();
    }
    tokens
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect())
        .collect()
}

fn prf_from_counts(hits: usize, cand: usize, reference: usize) -> Prf {
    match (cand, reference) {
        (0, 0) => Prf::PERFECT,
        (0, _) | (_, 0) => Prf::ZERO,
        _ => Prf::new(hits as f64 / cand as f64, hits as f64 / reference as f64),
    }
}

/// Clipped n-gram overlap.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> Result<Prf> {
    if n == 0 {
        return Err(Error::Parameter("rouge_n needs n ≥ 1".into()));
    }
    let c = ngrams(candidate, n);
    let r = ngrams(reference, n);
    let hits = overlap(&counts(c.iter()), &counts(r.iter()));
    Ok(prf_from_counts(hits, c.len(), r.len()))
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Prf {
    prf_from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// Multiset token overlap with the usual empty-answer conventions.
pub fn token_prf<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Prf {
    let c = counts(candidate.iter().map(AsRef::as_ref));
    let r = counts(reference.iter().map(AsRef::as_ref));
    prf_from_counts(overlap(&c, &r), candidate.len(), reference.len())
}

/// Sentence-level BLEU with add-one smoothing of zero match counts.
///
/// Orders run from 1 to `min(max_n, |candidate|)`; a zero-match order
/// contributes `1 / (count + 1)`.
pub fn bleu<S: AsRef<str>>(candidate: &[S], reference: &[S], max_n: usize) -> f64 {
    if candidate.is_empty() || max_n == 0 {
        return 0.0;
    }
    let orders = max_n.min(candidate.len());
    let mut stats = Vec::with_capacity(orders);
    for n in 1..=orders {
        let c = ngrams(candidate, n);
        let r = ngrams(reference, n);
        stats.push((overlap(&counts(c.iter()), &counts(r.iter())), c.len()));
    }
    smoothed_geo_mean(&stats) * brevity_penalty(candidate.len(), reference.len())
}

fn smoothed_geo_mean(stats: &[(usize, usize)]) -> f64 {
    let log_sum: f64 = stats
        .iter()
        .map(|&(m, c)| {
            if m == 0 {
                (1.0 / (c as f64 + 1.0)).ln()
            } else {
                (m as f64 / c as f64).ln()
            }
        })
        .sum();
    (log_sum / stats.len() as f64).exp()
}

fn brevity_penalty(cand: usize, reference: usize) -> f64 {
    if cand < reference {
        (1.0 - reference as f64 / cand as f64).exp()
    } else {
        1.0
    }
}

/// Corpus-level BLEU: counts and lengths are pooled before combining.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)], max_n: usize) -> f64 {
    let longest = pairs.iter().map(|(c, _)| c.len()).max().unwrap_or(0);
    let orders = max_n.min(longest);
    if orders == 0 {
        return 0.0;
    }
    let mut stats = vec![(0usize, 0usize); orders];
    let (mut cl, mut rl) = (0, 0);
    for (c, r) in pairs {
        cl += c.len();
        rl += r.len();
        for (n, st) in stats.iter_mut().enumerate() {
            let cg = ngrams(c, n + 1);
            let rg = ngrams(r, n + 1);
            st.0 += overlap(&counts(cg.iter()), &counts(rg.iter()));
            st.1 += cg.len();
        }
    }
    smoothed_geo_mean(&stats) * brevity_penalty(cl, rl)
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Macro precision and recall over every label seen in either list, and
/// their harmonic mean. A label that is never predicted has precision 0.
pub fn macro_prf(predictions: &[usize], gold: &[usize]) -> Result<Prf> {
    accuracy(predictions, gold)?;
    let mut labels: Vec<usize> = predictions.iter().chain(gold).copied().collect();
    labels.sort_unstable();
    labels.dedup();
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for &l in &labels {
        let tp = predictions.iter().zip(gold).filter(|(p, g)| **p == l && **g == l).count();
        let predicted = predictions.iter().filter(|p| **p == l).count();
        let actual = gold.iter().filter(|g| **g == l).count();
        if predicted > 0 {
            p_sum += tp as f64 / predicted as f64;
        }
        if actual > 0 {
            r_sum += tp as f64 / actual as f64;
        }
    }
    let k = labels.len() as f64;
    Ok(Prf::new(p_sum / k, r_sum / k))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuMode {
    #[default]
    Sentence,
    Corpus,
}

/// Text metrics of one generated answer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores one candidate answer against its reference after normalisation.
pub fn score_answer(candidate: &str, reference: &str) -> MetricRow {
    let c = normalize(candidate);
    let r = normalize(reference);
    let tok = token_prf(&c, &r);
    MetricRow {
        rouge1: rouge_n(&c, &r, 1).expect("n = 1").f1,
        rouge2: rouge_n(&c, &r, 2).expect("n = 2").f1,
        rouge_l: rouge_l(&c, &r).f1,
        bleu: bleu(&c, &r, 4),
        precision: tok.precision,
        recall: tok.recall,
        f1: tok.f1,
    }
}

/// Corpus-level scores. Absent fields do not apply to the task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge2: Option<f64>,
    #[serde(rename = "rougeL", skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    /// Harmonic mean of the reported precision and recall.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    /// Mean of the per-example F1 values.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub example_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub count: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Macro-averages per-example rows.
pub fn corpus_report(rows: &[MetricRow]) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::Contract("cannot report on zero examples".into()));
    }
    let precision = mean(rows.iter().map(|r| r.precision));
    let recall = mean(rows.iter().map(|r| r.recall));
    Ok(MetricReport {
        rouge1: Some(mean(rows.iter().map(|r| r.rouge1))),
        rouge2: Some(mean(rows.iter().map(|r| r.rouge2))),
        rouge_l: Some(mean(rows.iter().map(|r| r.rouge_l))),
        bleu: Some(mean(rows.iter().map(|r| r.bleu))),
        precision: Some(precision),
        recall: Some(recall),
        f1: Some(harmonic(precision, recall)),
        example_f1: Some(mean(rows.iter().map(|r| r.f1))),
        accuracy: None,
        count: rows.len(),
    })
}

/// Factoid report for candidate/reference text pairs.
pub fn factoid_report(
    candidates: &[String],
    references: &[String],
    mode: BleuMode,
) -> Result<MetricReport> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} answers for {} references",
            candidates.len(),
            references.len()
        )));
    }
    let rows: Vec<MetricRow> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| score_answer(c, r))
        .collect();
    let mut report = corpus_report(&rows)?;
    if mode == BleuMode::Corpus {
        let pairs: Vec<(Vec<String>, Vec<String>)> = candidates
            .iter()
            .zip(references)
            .map(|(c, r)| (normalize(c), normalize(r)))
            .collect();
        report.bleu = Some(corpus_bleu(&pairs, 4));
    }
    Ok(report)
}

/// Cloze report: accuracy plus macro-averaged class F1.
pub fn cloze_report(predictions: &[usize], gold: &[usize]) -> Result<MetricReport> {
    let acc = accuracy(predictions, gold)?;
    let prf = macro_prf(predictions, gold)?;
    Ok(MetricReport {
        precision: Some(prf.precision),
        recall: Some(prf.recall),
        f1: Some(prf.f1),
        accuracy: Some(acc),
        count: gold.len(),
        ..MetricReport::default()
    })
}

pub const FACTOID_CSV_HEADER: &str = "Models,Rouge-1,Rouge-2,Rouge-L,Bleu,Precision,Recall,F1-score";
pub const CLOZE_CSV_HEADER: &str = "Models,Accuracy,F1-score";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// One CSV row in the column order of the matching header.
pub fn csv_row(model: &str, r: &MetricReport) -> String {
    let name = if model.contains(',') || model.contains('"') {
        format!("\"{}\"", model.replace('"', "\"\""))
    } else {
        model.to_string()
    };
    if r.accuracy.is_some() {
        format!("{name},{},{}", cell(r.accuracy), cell(r.f1))
    } else {
        format!(
            "{name},{},{},{},{},{},{},{}",
            cell(r.rouge1),
            cell(r.rouge2),
            cell(r.rouge_l),
            cell(r.bleu),
            cell(r.precision),
            cell(r.recall),
            cell(r.f1)
        )
    }
}
