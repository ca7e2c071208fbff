//! Overlap metrics on binary masks: IoU, precision, recall, F1 and Dice.
//!
//! Dataset figures are micro-averaged: confusion counts are summed over all
//! samples before any ratio is taken. When both masks are empty every metric
//! is 1.0; otherwise a metric with a zero denominator is 0.0.

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::segmodel::SegModel;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// 1 where `pred >= tau`, else 0.
pub fn threshold(pred: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Threshold(tau));
    }
    Ok(pred.iter().map(|&p| if p >= tau { 1.0 } else { 0.0 }).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

fn binary(v: f64) -> Result<bool> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(Error::NonBinaryValue(v))
    }
}

pub fn confusion(pred: &[f64], truth: &[f64]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::dim("confusion", &[pred.len()], &[truth.len()]));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (binary(p)?, binary(t)?) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub dice: f64,
}

pub const CSV_HEADER: &str = "iou,precision,recall,f1,dice";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.iou, self.precision, self.recall, self.f1, self.dice
        )
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 is the harmonic mean of precision and recall; Dice is computed from
/// counts independently.
pub fn report(c: &ConfusionCounts) -> MetricsReport {
    if c.tp + c.fp + c.fn_ == 0 {
        return MetricsReport {
            iou: 1.0,
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            dice: 1.0,
        };
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricsReport {
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        precision,
        recall,
        f1,
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

/// Micro-averaged report over `(prediction, truth)` mask pairs.
pub fn micro_report<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<MetricsReport> {
    let mut total = ConfusionCounts::default();
    let mut any = false;
    for (p, t) in pairs {
        total = total + confusion(p, t)?;
        any = true;
    }
    if !any {
        return Err(Error::EmptyDataset);
    }
    Ok(report(&total))
}

/// Thresholded model predictions against each sample's mask, micro-averaged.
pub fn dataset_report(samples: &[Sample], model: &SegModel, tau: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let counts = samples
        .par_iter()
        .map(|s| {
            let prob = model.predict(&s.image)?;
            confusion(&threshold(prob.data(), tau)?, s.mask.data())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(&counts.into_iter().fold(ConfusionCounts::default(), |a, b| a + b)))
}
