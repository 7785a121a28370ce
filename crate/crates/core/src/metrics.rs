//! Ranking and thresholded accuracy metrics over `M×K` score matrices.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores (any monotone confidence) and 0/1 truth, both `M×K`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBatch {
    pub scores: Tensor,
    pub truth: Tensor,
}

impl EvalBatch {
    pub fn new(scores: Tensor, truth: Tensor) -> Result<Self> {
        if scores.shape() != truth.shape() || scores.ndim() != 2 {
            return Err(Error::Eval(format!(
                "scores {:?} and truth {:?} must be matching M×K matrices",
                scores.shape(),
                truth.shape()
            )));
        }
        if truth.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Eval("truth entries must be 0 or 1".into()));
        }
        if !scores.is_finite() {
            return Err(Error::Eval("scores must be finite".into()));
        }
        Ok(Self { scores, truth })
    }

    /// Assembles a batch from per-sample score and truth rows.
    pub fn from_rows(scores: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Eval("empty evaluation batch".into()));
        }
        let s = Tensor::from_rows(scores).map_err(|e| Error::Eval(e.to_string()))?;
        let t = Tensor::from_rows(truth).map_err(|e| Error::Eval(e.to_string()))?;
        Self::new(s, t)
    }

    pub fn samples(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn column(t: &Tensor, k: usize) -> Vec<f64> {
        let cols = t.shape()[1];
        t.data().iter().skip(k).step_by(cols).copied().collect()
    }
}

/// Non-interpolated AP with a stable descending sort; `None` without
/// positives.
pub fn average_precision(scores: &[f64], truth: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] == 1.0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Per-class AP, `None` for classes without positives.
pub fn per_class_ap(batch: &EvalBatch) -> Vec<Option<f64>> {
    (0..batch.classes())
        .map(|k| average_precision(&EvalBatch::column(&batch.scores, k), &EvalBatch::column(&batch.truth, k)))
        .collect()
}

/// Mean AP over classes that have at least one positive.
pub fn mean_ap(batch: &EvalBatch) -> Result<f64> {
    let aps: Vec<f64> = per_class_ap(batch).into_iter().flatten().collect();
    if aps.is_empty() {
        return Err(Error::Eval("no class has a positive sample; mAP undefined".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Fraction of rows whose first maximal score sits on the positive class.
pub fn top1_accuracy(batch: &EvalBatch) -> Result<f64> {
    let k = batch.classes();
    let mut correct = 0usize;
    for m in 0..batch.samples() {
        let truth = batch.truth.row(m);
        let positives: Vec<usize> = (0..k).filter(|&j| truth[j] == 1.0).collect();
        let [label] = positives[..] else {
            return Err(Error::Contract(format!("top-1 accuracy needs one positive per row; row {m} has {}", positives.len())));
        };
        let row = batch.scores.row(m);
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        correct += (best == label) as usize;
    }
    Ok(correct as f64 / batch.samples() as f64)
}

/// Per-label thresholded accuracy (`score ≥ threshold` predicts positive),
/// averaged over all `M·K` entries. With `subset`, a row counts only when
/// every label in it is right.
pub fn multilabel_accuracy(batch: &EvalBatch, threshold: f64, subset: bool) -> f64 {
    let hit = |s: f64, y: f64| (s >= threshold) == (y == 1.0);
    if subset {
        let rows = (0..batch.samples())
            .filter(|&m| batch.scores.row(m).iter().zip(batch.truth.row(m)).all(|(&s, &y)| hit(s, y)))
            .count();
        rows as f64 / batch.samples() as f64
    } else {
        let n = batch.scores.numel();
        batch.scores.data().iter().zip(batch.truth.data()).filter(|(&s, &y)| hit(s, y)).count() as f64 / n as f64
    }
}

/// `metric,value` lines with six decimals.
pub fn format_report(rows: &[(&str, f64)]) -> String {
    let mut out = String::new();
    for (name, value) in rows {
        writeln!(out, "{name},{value:.6}").expect("string write");
    }
    out
}
