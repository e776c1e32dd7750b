use serde::{Deserialize, Serialize};

use crate::data::{standardize_site, SiteRecord, Standardizer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};
use crate::scalar::Scalar;
use crate::signal::{encode_scaled_motion, MotionRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityGrid {
    pub pga_factors: Vec<f64>,
    pub spt_factors: Vec<f64>,
    /// `p[i][j]` is p_liq at `pga_factors[i]` and `spt_factors[j]`.
    pub p: Vec<Vec<f64>>,
}

/// Scaled-input model input: motion samples times `pga`, every SPT value times `spt`.
pub fn scaled_input<T: Scalar>(
    model: &Model<T>,
    st: &Standardizer,
    site: &SiteRecord,
    motion: &MotionRecord<f64>,
    pga: f64,
    spt: f64,
) -> Result<ModelInput<T>> {
    let spectrum = encode_scaled_motion(motion, pga, &model.config().spectral)?;
    let mut s = site.clone();
    for l in &mut s.layers {
        l.spt_n *= spt;
    }
    Ok(ModelInput::new(&spectrum, &standardize_site(st, &s)?))
}

/// p_liq over a PGA x SPT factor grid. The motion amplitude is applied
/// before normalization with the divisor of the unscaled motion.
pub fn sensitivity_grid<T: Scalar>(
    model: &Model<T>,
    st: &Standardizer,
    site: &SiteRecord,
    motion: &MotionRecord<f64>,
    pga_factors: &[f64],
    spt_factors: &[f64],
) -> Result<SensitivityGrid> {
    let pga_ok = pga_factors.iter().all(|a| a.is_finite() && (0.0..=1.0).contains(a));
    if !pga_ok || spt_factors.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidInput("PGA factors must lie in [0, 1] and SPT factors be finite and >= 0".into()));
    }
    let mut inputs = Vec::with_capacity(pga_factors.len() * spt_factors.len());
    for &a in pga_factors {
        for &s in spt_factors {
            inputs.push(scaled_input(model, st, site, motion, a, s)?);
        }
    }
    let preds = model.predict(&inputs)?;
    let p = preds.chunks(spt_factors.len().max(1)).map(|row| row.iter().map(|p| p.p_liq().as_f64()).collect()).collect();
    Ok(SensitivityGrid {
        pga_factors: pga_factors.to_vec(),
        spt_factors: spt_factors.to_vec(),
        p: if spt_factors.is_empty() { vec![Vec::new(); pga_factors.len()] } else { p },
    })
}
