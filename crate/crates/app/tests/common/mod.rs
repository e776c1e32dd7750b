#![allow(dead_code)]

use lqtf::data::synthetic::{SyntheticConfig, SyntheticCorpus};
use lqtf::data::{augment_null_motion, SiteRow};
use lqtf::model::{Model, ModelConfig};
use lqtf::signal::SpectralConfig;
use lqtf::train::inputs_for;
use lqtf_app::bundle::background_subset;
use lqtf_app::service::ServiceState;
use lqtf_app::{ModelBundle, MotionLibrary};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_ff: 32,
        soil_heads: 2,
        eq_heads: 2,
        h1: 16,
        h2: 8,
        spectral: SpectralConfig { len: 32, ..SpectralConfig::default() },
        seed: 5,
        ..ModelConfig::default()
    }
}

pub struct Fixture {
    pub corpus: SyntheticCorpus,
    pub state: ServiceState,
}

/// Untrained network over a 40-site corpus; every motion is in the library.
pub fn fixture(cfg: &ModelConfig) -> Fixture {
    let corpus = SyntheticCorpus::generate(&SyntheticConfig { n_sites: 40, ..SyntheticConfig::default() }).unwrap();
    let ds = augment_null_motion(&corpus.dataset(cfg.spectral).unwrap()).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let ds = ds.fit_standardizer(&all).unwrap();
    let (xs, _) = inputs_for::<f64>(&ds, &all).unwrap();
    let bundle = ModelBundle::new(Model::init(cfg).unwrap(), ds.standardizer.clone().unwrap(), background_subset(&xs)).unwrap();
    let motions = MotionLibrary { records: corpus.motions.iter().map(|m| (m.id.clone(), m.clone())).collect() };
    Fixture { corpus, state: ServiceState { bundle, motions } }
}

pub fn site_json(f: &Fixture, i: usize) -> serde_json::Value {
    serde_json::to_value(SiteRow::from_record(&f.corpus.sites[i])).unwrap()
}
