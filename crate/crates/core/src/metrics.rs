//! Evaluation metrics: accuracy, F1, Pearson and Spearman correlation, and
//! the combined `(acc+f1)/2` and `(pear+spear)/2` scores.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("metric inputs have lengths {a} and {b}")));
    }
    if a == 0 {
        return Err(Error::UndefinedMetric("metric over zero examples".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    /// Unweighted mean of per-class F1.
    #[default]
    Macro,
    /// F1 of pooled counts (equals accuracy for single-label data).
    Micro,
    /// Per-class F1 weighted by class support.
    Weighted,
}

/// Per-class F1 over the union of classes seen in `preds` or `labels`.
pub fn f1_score(preds: &[usize], labels: &[usize], average: F1Average) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let classes: BTreeSet<usize> = preds.iter().chain(labels).copied().collect();
    let mut per_class = Vec::with_capacity(classes.len());
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    for &c in &classes {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count();
        let fp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count();
        let fneg = preds.iter().zip(labels).filter(|&(&p, &l)| p != c && l == c).count();
        let support = labels.iter().filter(|&&l| l == c).count();
        let denom = 2 * tp + fp + fneg;
        let f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        per_class.push((f1, support));
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
    }
    Ok(match average {
        F1Average::Macro => per_class.iter().map(|(f, _)| f).sum::<f64>() / per_class.len() as f64,
        F1Average::Micro => 2.0 * tp_all as f64 / (2 * tp_all + fp_all + fn_all) as f64,
        F1Average::Weighted => per_class.iter().map(|&(f, s)| f * s as f64).sum::<f64>() / labels.len() as f64,
    })
}

pub fn f1_macro(preds: &[usize], labels: &[usize]) -> Result<f64> {
    f1_score(preds, labels, F1Average::Macro)
}

pub fn pearson<F: Scalar>(x: &[F], y: &[F]) -> Result<F> {
    check_lengths(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::UndefinedMetric("correlation needs at least two points".into()));
    }
    let n = F::of(x.len() as f64);
    let mx = x.iter().copied().sum::<F>() / n;
    let my = y.iter().copied().sum::<F>() / n;
    let (mut sxy, mut sxx, mut syy) = (F::zero(), F::zero(), F::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == F::zero() || syy == F::zero() {
        return Err(Error::UndefinedMetric("correlation of a constant sequence".into()));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-F::one()).min(F::one()))
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks<F: Scalar>(x: &[F]) -> Vec<F> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite metric input"));
    let mut ranks = vec![F::zero(); x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = F::of((i + j) as f64 / 2.0 + 1.0);
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman<F: Scalar>(x: &[F], y: &[F]) -> Result<F> {
    check_lengths(x.len(), y.len())?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Metrics for one evaluation; fields not applicable to the task are absent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_macro: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combined_acc_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combined_corr: Option<f64>,
}

impl MetricReport {
    pub fn classification(preds: &[usize], labels: &[usize]) -> Result<Self> {
        let acc = accuracy(preds, labels)?;
        let f1 = f1_macro(preds, labels)?;
        Ok(Self {
            accuracy: Some(acc),
            f1_macro: Some(f1),
            combined_acc_f1: Some((acc + f1) / 2.0),
            ..Default::default()
        })
    }

    pub fn regression<F: Scalar>(preds: &[F], targets: &[F]) -> Result<Self> {
        let p = pearson(preds, targets)?.as_f64();
        let s = spearman(preds, targets)?.as_f64();
        Ok(Self {
            pearson: Some(p),
            spearman: Some(s),
            combined_corr: Some((p + s) / 2.0),
            ..Default::default()
        })
    }

    /// Accuracy for classification reports, combined correlation otherwise.
    pub fn headline(&self) -> Option<f64> {
        self.accuracy.or(self.combined_corr)
    }
}
