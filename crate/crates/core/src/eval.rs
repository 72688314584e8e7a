//! Error rates, frame accuracy and clustering quality against ground truth.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{Provenance, TargetSet};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch for {id}: expected {expected}, got {got}")]
    LengthMismatch { id: String, expected: usize, got: usize },
    #[error("no ground truth for utterance {0}")]
    MissingTruth(String),
    #[error("no frames to evaluate")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorRateBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
    /// `(S + I + D) / reference_length`; infinite when the reference is
    /// empty and the hypothesis is not, 0 when both are empty.
    pub rate: f64,
}

impl ErrorRateBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn with_rate(mut self) -> Self {
        self.rate = match (self.errors(), self.reference_length) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, n) => e as f64 / n as f64,
        };
        self
    }

    /// Sums counts and recomputes the rate.
    pub fn merge(&self, other: &ErrorRateBreakdown) -> ErrorRateBreakdown {
        ErrorRateBreakdown {
            substitutions: self.substitutions + other.substitutions,
            insertions: self.insertions + other.insertions,
            deletions: self.deletions + other.deletions,
            reference_length: self.reference_length + other.reference_length,
            rate: 0.0,
        }
        .with_rate()
    }
}

/// Levenshtein alignment with unit costs. Among minimal alignments the
/// backtrace prefers substitution/match, then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> ErrorRateBreakdown {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = ErrorRateBreakdown {
        reference_length: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let differ = reference[i - 1] != hypothesis[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(differ) {
                out.substitutions += usize::from(differ);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out.with_rate()
}

/// Corpus-level error rate over `(reference, hypothesis)` pairs.
pub fn corpus_error_rate<'a, I>(pairs: I) -> ErrorRateBreakdown
where
    I: IntoIterator<Item = (&'a [u16], &'a [u16])>,
{
    pairs
        .into_iter()
        .fold(ErrorRateBreakdown::default(), |acc, (r, h)| acc.merge(&edit_distance(r, h)))
}

fn check_lengths<'a>(
    targets: &'a TargetSet,
    truth: &'a BTreeMap<String, Vec<u16>>,
) -> Result<Vec<(&'a [u16], &'a [u16])>, EvalError> {
    let mut pairs = Vec::with_capacity(targets.len());
    for e in &targets.entries {
        let t = truth
            .get(&e.id)
            .ok_or_else(|| EvalError::MissingTruth(e.id.clone()))?;
        if t.len() != e.labels.len() {
            return Err(EvalError::LengthMismatch {
                id: e.id.clone(),
                expected: t.len(),
                got: e.labels.len(),
            });
        }
        pairs.push((e.labels.as_slice(), t.as_slice()));
    }
    if pairs.iter().all(|(l, _)| l.is_empty()) {
        return Err(EvalError::Empty);
    }
    Ok(pairs)
}

/// Maps each label to the truth phoneme it co-occurs with most often; ties
/// go to the lowest phoneme id.
pub fn majority_mapping(labels: &[u16], truth: &[u16]) -> HashMap<u16, u16> {
    let mut counts: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    for (&l, &t) in labels.iter().zip(truth) {
        *counts.entry((l, t)).or_default() += 1;
    }
    let mut best: HashMap<u16, (u16, usize)> = HashMap::new();
    for (&(l, t), &c) in &counts {
        let slot = best.entry(l).or_insert((t, c));
        if c > slot.1 {
            *slot = (t, c);
        }
    }
    best.into_iter().map(|(l, (t, _))| (l, t)).collect()
}

/// Fraction of frames whose label matches the truth phoneme. Phoneme-valued
/// targets (phoneme-align, ground-truth) are compared directly; cluster ids
/// go through [`frame_accuracy_mapped`]. `truth` holds encoder-rate
/// alignments keyed by utterance id.
pub fn frame_accuracy(targets: &TargetSet, truth: &BTreeMap<String, Vec<u16>>) -> Result<f64, EvalError> {
    match targets.provenance {
        Provenance::PhonemeAlign | Provenance::GroundTruth => frame_accuracy_identity(targets, truth),
        _ => frame_accuracy_mapped(targets, truth),
    }
}

/// Accuracy after mapping each label to its majority truth phoneme, fit on
/// these same frames (optimistic by construction).
pub fn frame_accuracy_mapped(targets: &TargetSet, truth: &BTreeMap<String, Vec<u16>>) -> Result<f64, EvalError> {
    let pairs = check_lengths(targets, truth)?;
    let (labels, phones) = concat(&pairs);
    let map = majority_mapping(&labels, &phones);
    let hits = labels
        .iter()
        .zip(&phones)
        .filter(|(l, t)| map[l] == **t)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Like [`frame_accuracy`] but compares labels to phonemes directly.
pub fn frame_accuracy_identity(
    targets: &TargetSet,
    truth: &BTreeMap<String, Vec<u16>>,
) -> Result<f64, EvalError> {
    let pairs = check_lengths(targets, truth)?;
    let (labels, phones) = concat(&pairs);
    let hits = labels.iter().zip(&phones).filter(|(l, t)| l == t).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn concat(pairs: &[(&[u16], &[u16])]) -> (Vec<u16>, Vec<u16>) {
    pairs
        .iter()
        .flat_map(|(l, t)| l.iter().copied().zip(t.iter().copied()))
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub purity: f64,
    /// Mutual information over the arithmetic mean of the two entropies;
    /// 1 when both labelings are constant.
    pub nmi: f64,
}

pub fn cluster_metrics(labels: &[u16], truth: &[u16]) -> Result<ClusterMetrics, EvalError> {
    if labels.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            id: "<frames>".into(),
            expected: truth.len(),
            got: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = labels.len() as f64;
    let mut joint: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    let mut by_label: BTreeMap<u16, usize> = BTreeMap::new();
    let mut by_truth: BTreeMap<u16, usize> = BTreeMap::new();
    for (&l, &t) in labels.iter().zip(truth) {
        *joint.entry((l, t)).or_default() += 1;
        *by_label.entry(l).or_default() += 1;
        *by_truth.entry(t).or_default() += 1;
    }
    let mut best: BTreeMap<u16, usize> = BTreeMap::new();
    for (&(l, _), &c) in &joint {
        let b = best.entry(l).or_default();
        *b = (*b).max(c);
    }
    let purity = best.values().sum::<usize>() as f64 / n;

    let entropy = |m: &BTreeMap<u16, usize>| -> f64 {
        m.values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let hl = entropy(&by_label);
    let ht = entropy(&by_truth);
    let mi: f64 = joint
        .iter()
        .map(|(&(l, t), &c)| {
            let pj = c as f64 / n;
            let pl = by_label[&l] as f64 / n;
            let pt = by_truth[&t] as f64 / n;
            pj * (pj / (pl * pt)).ln()
        })
        .sum();
    let nmi = if hl + ht == 0.0 {
        1.0
    } else {
        (2.0 * mi / (hl + ht)).clamp(0.0, 1.0)
    };
    Ok(ClusterMetrics { purity, nmi })
}
