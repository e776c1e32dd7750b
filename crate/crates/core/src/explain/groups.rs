use serde::{Deserialize, Serialize};

use crate::data::{N_LAYERS, N_SITE_FEATURES};
use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::scalar::Scalar;

pub const N_GROUPS: usize = 1 + 2 * N_LAYERS + N_SITE_FEATURES;

/// Attribution players in fixed order.
pub const GROUP_NAMES: [&str; N_GROUPS] = [
    "EQ", "SPT_1", "SPT_2", "SPT_3", "SPT_4", "SPT_5", "SPT_6", "SPT_7", "SPT_8", "SPT_9", "SPT_10", "Soil_1", "Soil_2",
    "Soil_3", "Soil_4", "Soil_5", "Soil_6", "Soil_7", "Soil_8", "Soil_9", "Soil_10", "VS30", "Dist_epi", "WT",
    "Dist_Water",
];

/// Bitmask over groups; bit `i` set means group `i` keeps the instance value.
pub type Coalition = u32;

pub const FULL_COALITION: Coalition = (1 << N_GROUPS) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Eq,
    Spt(usize),
    Soil(usize),
    Site(usize),
}

impl Group {
    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::Eq),
            i if i <= N_LAYERS => Some(Self::Spt(i - 1)),
            i if i <= 2 * N_LAYERS => Some(Self::Soil(i - 1 - N_LAYERS)),
            i if i < N_GROUPS => Some(Self::Site(i - 1 - 2 * N_LAYERS)),
            _ => None,
        }
    }

    pub fn name(i: usize) -> Option<&'static str> {
        GROUP_NAMES.get(i).copied()
    }
}

pub fn group_index(name: &str) -> Option<usize> {
    GROUP_NAMES.iter().position(|g| *g == name)
}

/// Replacement values for absent groups.
#[derive(Clone, Debug)]
pub struct Background<T: Scalar = f64> {
    pub instances: Vec<ModelInput<T>>,
    pub mean_spt: [T; N_LAYERS],
    pub mean_soil: [T; N_LAYERS],
    pub mean_site: [T; N_SITE_FEATURES],
    pub null_spectrum: Vec<T>,
}

impl<T: Scalar> Background<T> {
    pub fn new(instances: Vec<ModelInput<T>>) -> Result<Self> {
        let first = instances.first().ok_or_else(|| Error::InvalidInput("background set is empty".into()))?;
        let l = first.spectrum.len();
        let n = T::of(instances.len() as f64);
        let mean = |get: &dyn Fn(&ModelInput<T>) -> T| instances.iter().map(get).sum::<T>() / n;
        let mean_spt = std::array::from_fn(|j| mean(&|x| x.spt[j]));
        let mean_soil = std::array::from_fn(|j| mean(&|x| x.soil[j]));
        let mean_site = std::array::from_fn(|j| mean(&|x| x.site[j]));
        Ok(Self { null_spectrum: vec![T::zero(); l], mean_spt, mean_soil, mean_site, instances })
    }
}

/// Model input with absent groups replaced: background means for scalars,
/// the null spectrum for EQ.
pub fn mask_instance<T: Scalar>(x: &ModelInput<T>, present: Coalition, bg: &Background<T>) -> ModelInput<T> {
    let has = |i: usize| present & (1 << i) != 0;
    ModelInput {
        spectrum: if has(0) { x.spectrum.clone() } else { bg.null_spectrum.clone() },
        spt: std::array::from_fn(|j| if has(1 + j) { x.spt[j] } else { bg.mean_spt[j] }),
        soil: std::array::from_fn(|j| if has(1 + N_LAYERS + j) { x.soil[j] } else { bg.mean_soil[j] }),
        site: std::array::from_fn(|j| if has(1 + 2 * N_LAYERS + j) { x.site[j] } else { bg.mean_site[j] }),
    }
}
