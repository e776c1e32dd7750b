//! CPT to SPT equivalence: `qt / pa = A * N60^B` with
//! `A = 92.728 Ic^-2.746` and `B = -0.1185 Ic^2 + 0.5333 Ic - 0.0764`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Atmospheric pressure in MPa.
pub const ATMOSPHERIC_PRESSURE_MPA: f64 = 0.1;

/// Soil behaviour type index used for each mapped soil class.
pub const IC_SAND: f64 = 1.7;
pub const IC_SILTY_SAND: f64 = 2.2;
pub const IC_CLAY: f64 = 2.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CptSample {
    /// Cone resistance, MPa.
    pub qt: f64,
    /// Soil behaviour type index.
    pub ic: f64,
}

/// `(A, B)` for a given `Ic`.
pub fn cpt_coefficients(ic: f64) -> (f64, f64) {
    let a = 92.728 * ic.powf(-2.746);
    let b = -0.1185 * ic * ic + 0.5333 * ic - 0.0764;
    (a, b)
}

/// Equivalent N60 blow count for a CPT reading.
pub fn cpt_to_spt(sample: CptSample, pa: f64) -> Result<f64> {
    if !(sample.qt.is_finite() && sample.qt > 0.0) {
        return Err(Error::Domain(format!("qt must be > 0, got {}", sample.qt)));
    }
    if !(sample.ic.is_finite() && sample.ic > 0.0) {
        return Err(Error::Domain(format!("Ic must be > 0, got {}", sample.ic)));
    }
    if !(pa.is_finite() && pa > 0.0) {
        return Err(Error::Domain(format!("atmospheric pressure must be > 0, got {pa}")));
    }
    let (a, b) = cpt_coefficients(sample.ic);
    if b <= 0.0 {
        return Err(Error::Domain(format!("exponent B = {b} is not positive for Ic = {}", sample.ic)));
    }
    Ok((sample.qt / (pa * a)).powf(1.0 / b))
}
