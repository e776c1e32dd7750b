//! A trained model directory: checkpoint, standardizer and attribution
//! background, plus the raw motions that site rows refer to.

use std::collections::BTreeMap;
use std::path::Path;

use lqtf::data::{standardize_site, SiteRecord, Standardizer, NULL_MOTION_ID};
use lqtf::explain::{sensitivity_grid, shapley_sample, Attribution, Background, ModelGame, SensitivityGrid};
use lqtf::model::{checkpoint_bytes, model_from_bytes, Model, ModelInput};
use lqtf::signal::{encode_motion, parse_motion_csv, MotionInput, MotionRecord};
use lqtf::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CHECKPOINT_FILE: &str = "model.lqtf";
pub const STANDARDIZER_FILE: &str = "standardizer.json";
pub const BACKGROUND_FILE: &str = "background.json";
/// Upper bound on stored background instances.
pub const BACKGROUND_SIZE: usize = 100;

/// Class probabilities for one site, as served and written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictResponse {
    pub p_liq: f64,
    pub p_noliq: f64,
    pub model_version: String,
}

pub struct ModelBundle {
    pub model: Model,
    pub standardizer: Standardizer,
    pub background: Background,
    /// `lqtf1-` and the first 12 hex digits of the checkpoint's SHA-256.
    pub version: String,
}

fn version_of(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("lqtf1-{hex}")
}

/// Evenly spaced picks, at most `BACKGROUND_SIZE` of them.
pub fn background_subset<T: Clone>(items: &[T]) -> Vec<T> {
    if items.len() <= BACKGROUND_SIZE {
        return items.to_vec();
    }
    (0..BACKGROUND_SIZE).map(|i| items[i * items.len() / BACKGROUND_SIZE].clone()).collect()
}

impl ModelBundle {
    pub fn new(model: Model, standardizer: Standardizer, background: Vec<ModelInput>) -> Result<Self> {
        let version = version_of(&checkpoint_bytes(&model)?);
        Ok(Self { model, standardizer, background: Background::new(background)?, version })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CHECKPOINT_FILE), checkpoint_bytes(&self.model)?)?;
        std::fs::write(dir.join(STANDARDIZER_FILE), serde_json::to_string_pretty(&self.standardizer)?)?;
        std::fs::write(dir.join(BACKGROUND_FILE), serde_json::to_string(&self.background.instances)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            std::fs::read(dir.join(name))
                .map_err(|e| Error::InvalidInput(format!("model bundle file {}: {e}", dir.join(name).display())))
        };
        let bytes = read(CHECKPOINT_FILE)?;
        let model: Model = model_from_bytes(&bytes)?;
        let standardizer: Standardizer = serde_json::from_slice(&read(STANDARDIZER_FILE)?)?;
        let instances: Vec<ModelInput> = serde_json::from_slice(&read(BACKGROUND_FILE)?)?;
        let spec_len = model.config().l_spec();
        if instances.iter().any(|x| x.spectrum.len() != spec_len) {
            return Err(Error::Checkpoint(format!("background spectra do not have {spec_len} bins")));
        }
        Ok(Self { model, standardizer, background: Background::new(instances)?, version: version_of(&bytes) })
    }

    pub fn input(&self, site: &SiteRecord, motion: MotionInput<'_>) -> Result<ModelInput> {
        let spectrum = encode_motion(motion, &self.model.config().spectral)?;
        Ok(ModelInput::new(&spectrum, &standardize_site(&self.standardizer, site)?))
    }

    pub fn predict(&self, inputs: &[ModelInput]) -> Result<Vec<PredictResponse>> {
        Ok(self
            .model
            .predict(inputs)?
            .into_iter()
            .map(|p| PredictResponse { p_liq: p.p[1], p_noliq: p.p[0], model_version: self.version.clone() })
            .collect())
    }

    pub fn explain(&self, x: &ModelInput, n_perms: usize, seed: u64) -> Result<Attribution> {
        let game = ModelGame::new(&self.model, x, &self.background)?;
        shapley_sample(&game, n_perms, seed)
    }

    pub fn sensitivity(&self, site: &SiteRecord, motion: &MotionRecord, pga: &[f64], spt: &[f64]) -> Result<SensitivityGrid> {
        sensitivity_grid(&self.model, &self.standardizer, site, motion, pga, spt)
    }
}

/// Raw motions by id, read from `<motion_id>.csv` files.
#[derive(Clone, Debug, Default)]
pub struct MotionLibrary {
    pub records: BTreeMap<String, MotionRecord>,
}

impl MotionLibrary {
    /// Every `*.csv` file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut records = BTreeMap::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        paths.sort();
        for path in paths {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if id == NULL_MOTION_ID {
                return Err(Error::InvalidInput(format!("motion id `{NULL_MOTION_ID}` is reserved")));
            }
            let rec = parse_motion_csv(&id, &std::fs::read_to_string(&path)?)?;
            records.insert(id, rec);
        }
        Ok(Self { records })
    }

    /// The motion of `id`: the null motion for the reserved id, else a stored record.
    pub fn resolve(&self, id: &str) -> Result<MotionInput<'_>> {
        if id == NULL_MOTION_ID {
            return Ok(MotionInput::Null);
        }
        self.records
            .get(id)
            .map(MotionInput::Record)
            .ok_or_else(|| Error::InvalidInput(format!("unknown motion `{id}`")))
    }
}
