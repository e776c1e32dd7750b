use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::bce_value;

/// Mean binary cross-entropy of `p_liq` against 0/1 targets.
pub fn bce_loss(y_true: &[f64], p_liq: &[f64]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if y_true.len() != p_liq.len() {
        return Err(Error::Shape(format!("{} labels for {} probabilities", y_true.len(), p_liq.len())));
    }
    Ok(bce_value(y_true, p_liq.iter().copied()))
}

/// Counts with liquefied as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Absent when the partition holds no liquefied samples.
    pub recall: Option<f64>,
    pub confusion: Confusion,
}

impl Metrics {
    /// Decision is `p_liq > 0.5`; an exact 0.5 counts as not liquefied.
    pub fn from_predictions(y_true: &[f64], p_liq: &[f64]) -> Result<Self> {
        let loss = bce_loss(y_true, p_liq)?;
        let mut c = Confusion::default();
        for (&y, &p) in y_true.iter().zip(p_liq) {
            match (y > 0.5, p > 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
        let recall = (c.tp + c.fn_ > 0).then(|| c.tp as f64 / (c.tp + c.fn_) as f64);
        Ok(Self { loss, accuracy, recall, confusion: c })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub folds: Vec<Metrics>,
    pub mean_accuracy: f64,
    /// Population standard deviation.
    pub std_accuracy: f64,
}

impl FoldReport {
    pub fn new(folds: Vec<Metrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::InvalidInput("no folds".into()));
        }
        let n = folds.len() as f64;
        let mean = folds.iter().map(|m| m.accuracy).sum::<f64>() / n;
        let var = folds.iter().map(|m| (m.accuracy - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { folds, mean_accuracy: mean, std_accuracy: var.sqrt() })
    }
}
