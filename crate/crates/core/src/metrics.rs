//! Multi-label evaluation: per-class AP, mAP, CF1/OF1 and forgetting.
//!
//! Score and label matrices are `[samples, classes]` tensors; labels hold
//! 0 or 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// All-points average precision: the mean, over positives, of the precision
/// at each positive's rank. Scores are ranked descending; ties keep the
/// original sample order. Returns `None` when there is no positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

fn check_pair(op: &'static str, scores: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    if scores.shape() != labels.shape() || scores.rank() != 2 {
        return Err(Error::shape(op, scores.shape(), labels.shape()));
    }
    Ok((scores.shape()[0], scores.shape()[1]))
}

fn column(t: &Tensor, c: usize) -> impl Iterator<Item = f64> + '_ {
    let n = t.shape()[1];
    t.data().iter().skip(c).step_by(n).copied()
}

/// AP for every class column; `None` for classes without positives.
pub fn per_class_ap(scores: &Tensor, labels: &Tensor) -> Result<Vec<Option<f64>>> {
    let (_, n) = check_pair("per_class_ap", scores, labels)?;
    Ok((0..n)
        .map(|c| {
            let s: Vec<f64> = column(scores, c).collect();
            let l: Vec<bool> = column(labels, c).map(|v| v > 0.5).collect();
            average_precision(&s, &l)
        })
        .collect())
}

/// Mean of the per-class APs over classes with at least one positive.
pub fn map_score(scores: &Tensor, labels: &Tensor) -> Result<f64> {
    mean_ap(&per_class_ap(scores, labels)?)
}

pub fn mean_ap(aps: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("map_score", "no class has a positive label"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    /// `2TP / (2TP + FP + FN)`, zero when the denominator is zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Per-class confusion counts with predictions `score >= tau`.
pub fn confusion_per_class(scores: &Tensor, labels: &Tensor, tau: f64) -> Result<Vec<Confusion>> {
    let (_, n) = check_pair("cf1_of1", scores, labels)?;
    let mut out = vec![Confusion::default(); n];
    for (i, (&s, &l)) in scores.data().iter().zip(labels.data()).enumerate() {
        let c = &mut out[i % n];
        match (s >= tau, l > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(out)
}

/// Macro F1 (mean of per-class F1) and micro F1 (pooled counts).
pub fn cf1_of1(scores: &Tensor, labels: &Tensor, tau: f64) -> Result<(f64, f64)> {
    let per = confusion_per_class(scores, labels, tau)?;
    if per.is_empty() {
        return Ok((0.0, 0.0));
    }
    let cf1 = per.iter().map(Confusion::f1).sum::<f64>() / per.len() as f64;
    let pooled = per.iter().fold(Confusion::default(), |a, c| Confusion {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    Ok((cf1, pooled.f1()))
}

/// Lower-triangular record: `row t` holds the score of every task `t′ ≤ t`
/// after training stage `t` (both 0-indexed here).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::invalid(
                "accuracy_matrix",
                format!("row {} must have {} entries", self.rows.len(), self.rows.len() + 1),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Mean over earlier tasks of (best score attained on the task − final score).
///
/// The best score ranges over every stage that evaluated the task, the final
/// one included, so each term is non-negative and vanishes when a task peaks
/// at the end.
pub fn forgetting(r: &AccuracyMatrix) -> f64 {
    let t = r.stages();
    if t <= 1 {
        return 0.0;
    }
    let last = &r.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|task| {
            let best = (task..t)
                .map(|stage| r.rows[stage][task])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[task]
        })
        .sum();
    total / (t - 1) as f64
}

/// Metrics of one evaluation session over all classes learned so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    /// 1-indexed stage.
    pub session: usize,
    /// `(class_id, AP)`; AP is `None` when the class has no positive.
    pub per_class_ap: Vec<(usize, Option<f64>)>,
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    /// mAP restricted to each task's classes, for tasks `1..=session`.
    pub task_maps: Vec<f64>,
    pub samples: usize,
    pub skipped_classes: Vec<usize>,
}
