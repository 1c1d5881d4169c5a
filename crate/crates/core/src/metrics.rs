//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::argmax;

/// Equal-width confidence bins for calibration error.
pub const ECE_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Recall per true class; `None` for classes absent from the truth.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub ece: f64,
    /// Area under the ROC curve of `p̂(class 1)`, binary problems only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

impl Metrics {
    /// Metrics for predicted distributions `probs` (one per sample) against `truth`.
    pub fn compute(probs: &[Vec<f64>], truth: &[usize], k: usize) -> Result<Metrics> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("metrics of an empty prediction set".into()));
        }
        if probs.len() != truth.len() {
            return Err(Error::Shape {
                expected: format!("{} predictions", truth.len()),
                got: format!("{}", probs.len()),
            });
        }
        let predictions: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let confidences: Vec<f64> = probs.iter().zip(&predictions).map(|(p, &c)| p[c]).collect();
        let mut m = label_metrics(&predictions, truth, k)?;
        m.ece = expected_calibration_error(&confidences, &predictions, truth);
        if k == 2 {
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            m.auc = binary_auc(&scores, truth);
        }
        Ok(m)
    }
}

/// Accuracy, macro-F1 and per-class accuracy from hard predictions. `ece` is 0.
pub fn label_metrics(predictions: &[usize], truth: &[usize], k: usize) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::InvalidInput("metrics of an empty prediction set".into()));
    }
    if predictions.len() != truth.len() {
        return Err(Error::Shape {
            expected: format!("{} predictions", truth.len()),
            got: format!("{}", predictions.len()),
        });
    }
    let n = truth.len();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut support = vec![0usize; k];
    for (&p, &t) in predictions.iter().zip(truth) {
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let f1: Vec<f64> = (0..k)
        .map(|c| {
            let fn_ = support[c] - tp[c];
            let denom = 2 * tp[c] + fp[c] + fn_;
            if support[c] == 0 || denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    Ok(Metrics {
        accuracy: correct as f64 / n as f64,
        macro_f1: f1.iter().sum::<f64>() / k as f64,
        per_class_accuracy: (0..k)
            .map(|c| (support[c] > 0).then(|| tp[c] as f64 / support[c] as f64))
            .collect(),
        ece: 0.0,
        auc: None,
    })
}

/// Weighted mean over [`ECE_BINS`] equal-width bins of |accuracy − confidence|.
pub fn expected_calibration_error(confidences: &[f64], predictions: &[usize], truth: &[usize]) -> f64 {
    let mut count = [0usize; ECE_BINS];
    let mut conf_sum = [0.0f64; ECE_BINS];
    let mut correct = [0usize; ECE_BINS];
    for ((&c, &p), &t) in confidences.iter().zip(predictions).zip(truth) {
        let b = ((c * ECE_BINS as f64) as usize).min(ECE_BINS - 1);
        count[b] += 1;
        conf_sum[b] += c;
        correct[b] += (p == t) as usize;
    }
    let n = confidences.len() as f64;
    (0..ECE_BINS)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum()
}

/// Mann–Whitney AUC with ties counted as one half. `None` without both classes.
pub fn binary_auc(scores: &[f64], truth: &[usize]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank over the tie group
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if truth[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = truth.iter().filter(|&&t| t == 1).count() as f64;
    let n_neg = truth.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    Some((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Precision, recall and F1 of boolean flags against boolean ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlagScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub flagged: usize,
}

pub fn flag_score(flags: &[bool], truth: &[bool]) -> FlagScore {
    let tp = flags.iter().zip(truth).filter(|(f, t)| **f && **t).count() as f64;
    let flagged = flags.iter().filter(|f| **f).count();
    let positives = truth.iter().filter(|t| **t).count() as f64;
    let precision = if flagged == 0 { 0.0 } else { tp / flagged as f64 };
    let recall = if positives == 0.0 { 0.0 } else { tp / positives };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    FlagScore {
        precision,
        recall,
        f1,
        flagged,
    }
}
