//! Mean F1 over a fixed class set.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
    pub fn f1(&self, class: usize) -> f64 {
        let num = 2 * self.tp[class];
        let den = num + self.fp[class] + self.fn_[class];
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    /// A class is present when it occurs among the truths or the predictions.
    pub fn present(&self, class: usize) -> bool {
        self.tp[class] + self.fp[class] + self.fn_[class] > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub mean_f1: f64,
    pub per_class: Vec<f64>,
    pub counts: ConfusionCounts,
}

/// How classes are averaged into the mean F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    /// Divide by the full class count; absent classes contribute 0.
    #[default]
    AllClasses,
    /// Average only over classes seen in truths or predictions.
    PresentClasses,
}

pub fn confusion(preds: &[usize], truths: &[usize], num_classes: usize) -> Result<ConfusionCounts> {
    if preds.len() != truths.len() {
        return Err(Error::Validation(alloc::format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if let Some(bad) = preds.iter().chain(truths).find(|&&c| c >= num_classes) {
        return Err(Error::Validation(alloc::format!(
            "class id {bad} outside [0, {num_classes})"
        )));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fn_ = vec![0u64; num_classes];
    for (&p, &t) in preds.iter().zip(truths) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let n = preds.len() as u64;
    let tn = (0..num_classes).map(|c| n - tp[c] - fp[c] - fn_[c]).collect();
    Ok(ConfusionCounts { tp, fp, fn_, tn })
}

pub fn mean_f1(preds: &[usize], truths: &[usize], num_classes: usize) -> Result<F1Report> {
    mean_f1_with(preds, truths, num_classes, F1Average::AllClasses)
}

pub fn mean_f1_with(preds: &[usize], truths: &[usize], num_classes: usize, average: F1Average) -> Result<F1Report> {
    if num_classes == 0 {
        return Err(Error::Validation("mean F1 needs at least one class".into()));
    }
    let counts = confusion(preds, truths, num_classes)?;
    let per_class: Vec<f64> = (0..num_classes).map(|c| counts.f1(c)).collect();
    let mean_f1 = match average {
        F1Average::AllClasses => per_class.iter().sum::<f64>() / num_classes as f64,
        F1Average::PresentClasses => {
            let present: Vec<usize> = (0..num_classes).filter(|&c| counts.present(c)).collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|&c| per_class[c]).sum::<f64>() / present.len() as f64
            }
        }
    };
    Ok(F1Report {
        mean_f1,
        per_class,
        counts,
    })
}

/// Mean and sample standard deviation (`n - 1`; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}
