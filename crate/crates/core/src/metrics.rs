//! Binary segmentation metrics from confusion counts.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Dice, IoU, accuracy, recall and specificity as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub rec: f64,
    pub spe: f64,
}

/// `num / den`, or 1 when the denominator is empty (every error count that
/// feeds it is then zero as well).
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricReport {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        Self {
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
            acc: ratio(c.tp + c.tn, c.total()),
            rec: ratio(c.tp, c.tp + c.fn_),
            spe: ratio(c.tn, c.tn + c.fp),
        }
    }

    /// Unweighted mean over reports; all zeros for an empty slice.
    pub fn mean(reports: &[MetricReport]) -> Self {
        if reports.is_empty() {
            return Self::default();
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            dice: sum(|r| r.dice),
            iou: sum(|r| r.iou),
            acc: sum(|r| r.acc),
            rec: sum(|r| r.rec),
            spe: sum(|r| r.spe),
        }
    }

    pub fn as_percentages(&self) -> [f64; 5] {
        [self.dice, self.iou, self.acc, self.rec, self.spe].map(|v| 100.0 * v)
    }
}

fn is_binary<T: Element>(v: T) -> bool {
    v == T::zero() || v == T::one()
}

pub fn confusion_counts<T: Element>(pred: &[T], gt: &[T]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(shape_err(
            "confusion_counts",
            format!("{} predictions vs {} labels", pred.len(), gt.len()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        if !is_binary(p) || !is_binary(g) {
            return Err(Error::Invalid("confusion metrics need binary masks".into()));
        }
        match (p == T::one(), g == T::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Metrics of one binary prediction against its ground truth.
pub fn confusion_metrics<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<MetricReport> {
    pred.expect_same_shape(gt, "confusion_metrics")?;
    Ok(MetricReport::from_counts(&confusion_counts(pred.data(), gt.data())?))
}
