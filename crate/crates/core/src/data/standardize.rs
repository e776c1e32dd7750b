use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature z-scoring with population statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on row-major samples, one value per named feature.
    pub fn fit(names: &[&str], rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidInput(format!("standardizer needs at least 2 rows, got {}", rows.len())));
        }
        let d = names.len();
        if let Some(r) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::Shape(format!("row {r} has {} values for {d} features", rows[r].len())));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        Ok(Self { names: names.iter().map(|s| s.to_string()).collect(), mean, std })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// `(x - mean) / std`, or 0 for a constant feature.
    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.len() {
            return Err(Error::Shape(format!("{} values for {} standardized features", row.len(), self.len())));
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| if s > 0.0 { (x - m) / s } else { 0.0 })
            .collect())
    }

    /// Checks feature names before applying.
    pub fn apply_named(&self, names: &[&str], row: &[f64]) -> Result<Vec<f64>> {
        if names.len() != self.names.len() || names.iter().zip(&self.names).any(|(a, b)| a != b) {
            return Err(Error::State(format!("feature names {names:?} do not match fitted {:?}", self.names)));
        }
        self.apply(row)
    }

    pub fn invert(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.len() {
            return Err(Error::Shape(format!("{} values for {} standardized features", row.len(), self.len())));
        }
        Ok(row.iter().zip(self.mean.iter().zip(&self.std)).map(|(&z, (&m, &s))| z * s + m).collect())
    }
}
