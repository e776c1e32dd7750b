//! Site records, ingestion, CPT conversion, standardization, augmentation and splits.

mod cpt;
mod records;
mod sites_csv;
mod split;
mod standardize;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cpt::{cpt_coefficients, cpt_to_spt, CptSample, ATMOSPHERIC_PRESSURE_MPA, IC_CLAY, IC_SAND, IC_SILTY_SAND};
pub use records::{Label, SiteRecord, SoilLayer, SoilType, N_LAYERS, N_SITE_FEATURES, STANDARDIZED_FEATURES};
pub use sites_csv::{parse_sites_csv, sites_to_csv, SiteRow, SITE_COLUMNS};
pub use split::{fold_train_indices, kfold_indices, stratified_split, Split};
pub use standardize::Standardizer;

use crate::error::{Error, Result};
use crate::signal::{encode_motion, parse_motion_csv, MotionInput, SpectralConfig, Spectrum};

/// Motion id carried by null-motion twins; resolves to the all-zero spectrum.
pub const NULL_MOTION_ID: &str = "__null__";

/// Standardized numeric view of one site, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteFeatures {
    pub spt: [f64; N_LAYERS],
    pub soil: [f64; N_LAYERS],
    pub site: [f64; N_SITE_FEATURES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sites: Vec<SiteRecord>,
    pub motions: BTreeMap<String, Spectrum<f64>>,
    pub spectral: SpectralConfig,
    pub standardizer: Option<Standardizer>,
}

impl Dataset {
    pub fn new(sites: Vec<SiteRecord>, motions: BTreeMap<String, Spectrum<f64>>, spectral: SpectralConfig) -> Result<Self> {
        let ds = Self { sites, motions, spectral, standardizer: None };
        ds.validate()?;
        Ok(ds)
    }

    /// Reads a sites CSV and encodes `<motion_id>.csv` from `motions_dir` for every referenced motion.
    pub fn load(sites_csv: &Path, motions_dir: &Path, spectral: SpectralConfig) -> Result<Self> {
        let sites = parse_sites_csv(&std::fs::read_to_string(sites_csv)?)?;
        let mut motions = BTreeMap::new();
        for s in &sites {
            if motions.contains_key(&s.motion_id) {
                continue;
            }
            let path = motions_dir.join(format!("{}.csv", s.motion_id));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::InvalidInput(format!("motion `{}` ({}): {e}", s.motion_id, path.display())))?;
            let rec = parse_motion_csv(&s.motion_id, &text)?;
            motions.insert(s.motion_id.clone(), encode_motion(MotionInput::Record(&rec), &spectral)?);
        }
        Self::new(sites, motions, spectral)
    }

    pub fn validate(&self) -> Result<()> {
        for (id, spec) in &self.motions {
            if spec.bins.len() != self.spectral.len {
                return Err(Error::Shape(format!(
                    "motion `{id}` has {} bins, expected {}",
                    spec.bins.len(),
                    self.spectral.len
                )));
            }
        }
        for s in &self.sites {
            s.validate()?;
            self.spectrum(s)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn is_augmented(&self) -> bool {
        self.sites.iter().any(|s| s.null_twin)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.sites.iter().map(|s| s.label.into()).collect()
    }

    pub fn spectrum(&self, site: &SiteRecord) -> Result<&Spectrum<f64>> {
        self.motions
            .get(&site.motion_id)
            .ok_or_else(|| Error::InvalidInput(format!("site `{}` references unknown motion `{}`", site.site_id, site.motion_id)))
    }

    /// Copy of the dataset with a standardizer fitted on `train` only.
    pub fn fit_standardizer(&self, train: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = train
            .iter()
            .map(|&i| self.sites.get(i).map(SiteRecord::standardizable))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::InvalidInput("training index out of range".into()))?;
        let standardizer = Standardizer::fit(&STANDARDIZED_FEATURES, &rows)?;
        Ok(Self { standardizer: Some(standardizer), ..self.clone() })
    }

    pub fn features(&self, site: &SiteRecord) -> Result<SiteFeatures> {
        let st = self.standardizer.as_ref().ok_or_else(|| Error::State("standardizer has not been fitted".into()))?;
        standardize_site(st, site)
    }
}

pub fn standardize_site(st: &Standardizer, site: &SiteRecord) -> Result<SiteFeatures> {
    let z = st.apply_named(&STANDARDIZED_FEATURES, &site.standardizable())?;
    let mut spt = [0.0; N_LAYERS];
    spt.copy_from_slice(&z[..N_LAYERS]);
    let mut feats = [0.0; N_SITE_FEATURES];
    feats.copy_from_slice(&z[N_LAYERS..]);
    Ok(SiteFeatures { spt, soil: site.soil_tokens(), site: feats })
}

/// Appends a zero-motion, non-liquefied twin for every site.
pub fn augment_null_motion(ds: &Dataset) -> Result<Dataset> {
    if ds.is_augmented() {
        return Err(Error::State("dataset already contains null-motion twins".into()));
    }
    let mut motions = ds.motions.clone();
    match motions.get(NULL_MOTION_ID) {
        Some(s) if !s.is_null() => {
            return Err(Error::InvalidInput(format!("motion id `{NULL_MOTION_ID}` is reserved")));
        }
        _ => {
            motions.insert(NULL_MOTION_ID.to_string(), Spectrum::zeros(&ds.spectral));
        }
    }
    let mut sites = ds.sites.clone();
    sites.extend(ds.sites.iter().map(null_twin));
    Ok(Dataset { sites, motions, spectral: ds.spectral, standardizer: ds.standardizer.clone() })
}

/// The site under the null motion, labelled not liquefied.
pub fn null_twin(s: &SiteRecord) -> SiteRecord {
    SiteRecord {
        site_id: format!("{}{NULL_MOTION_ID}", s.site_id),
        motion_id: NULL_MOTION_ID.to_string(),
        label: Label::NotLiquefied,
        null_twin: true,
        ..s.clone()
    }
}
