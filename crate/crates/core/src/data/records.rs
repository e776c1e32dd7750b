use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_LAYERS: usize = 10;
pub const N_SITE_FEATURES: usize = 4;

/// Soil class token fed to the soil encoder as a raw channel value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SoilType {
    Sand = 1,
    SiltySand = 2,
    Clay = 3,
}

impl SoilType {
    pub fn token(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for SoilType {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::Sand),
            2 => Ok(Self::SiltySand),
            3 => Ok(Self::Clay),
            _ => Err(Error::InvalidInput(format!("soil_type out of domain: {v}"))),
        }
    }
}

impl From<SoilType> for u8 {
    fn from(s: SoilType) -> u8 {
        s.token()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoilLayer {
    pub spt_n: f64,
    pub soil_type: SoilType,
}

/// Class label; `Liquefied` is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    NotLiquefied = 0,
    Liquefied = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::NotLiquefied),
            1 => Ok(Self::Liquefied),
            _ => Err(Error::InvalidInput(format!("label must be 0 or 1, got {v}"))),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl From<bool> for Label {
    fn from(b: bool) -> Self {
        if b {
            Self::Liquefied
        } else {
            Self::NotLiquefied
        }
    }
}

/// One site: a 1 m layered profile to 10 m, four site scalars and a motion reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site_id: String,
    pub layers: [SoilLayer; N_LAYERS],
    pub vs30: f64,
    pub dist_epi: f64,
    pub wt_depth: f64,
    pub dist_water: f64,
    pub motion_id: String,
    pub label: Label,
    /// Set on records produced by null-motion augmentation.
    #[serde(default)]
    pub null_twin: bool,
}

impl SiteRecord {
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if !(l.spt_n.is_finite() && l.spt_n >= 0.0) {
                return Err(Error::InvalidInput(format!("spt_{} must be finite and >= 0, got {}", i + 1, l.spt_n)));
            }
        }
        let check = |name: &str, v: f64, strict: bool| {
            let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
            if ok {
                Ok(())
            } else {
                let op = if strict { ">" } else { ">=" };
                Err(Error::InvalidInput(format!("{name} must be finite and {op} 0, got {v}")))
            }
        };
        check("vs30", self.vs30, true)?;
        check("dist_epi", self.dist_epi, false)?;
        check("wt_depth", self.wt_depth, false)?;
        check("dist_water", self.dist_water, false)?;
        Ok(())
    }

    pub fn spt(&self) -> [f64; N_LAYERS] {
        self.layers.map(|l| l.spt_n)
    }

    pub fn soil_tokens(&self) -> [f64; N_LAYERS] {
        self.layers.map(|l| f64::from(l.soil_type.token()))
    }

    /// `[vs30, dist_epi, wt_depth, dist_water]`
    pub fn site_features(&self) -> [f64; N_SITE_FEATURES] {
        [self.vs30, self.dist_epi, self.wt_depth, self.dist_water]
    }

    pub fn mean_spt(&self) -> f64 {
        self.layers.iter().map(|l| l.spt_n).sum::<f64>() / N_LAYERS as f64
    }

    /// The 14 standardized values in `STANDARDIZED_FEATURES` order.
    pub fn standardizable(&self) -> Vec<f64> {
        let mut v = self.spt().to_vec();
        v.extend_from_slice(&self.site_features());
        v
    }
}

pub const STANDARDIZED_FEATURES: [&str; 14] = [
    "spt_1", "spt_2", "spt_3", "spt_4", "spt_5", "spt_6", "spt_7", "spt_8", "spt_9", "spt_10", "vs30", "dist_epi",
    "wt_depth", "dist_water",
];
