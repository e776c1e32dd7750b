//! Synthetic site/motion corpus with a known liquefaction rule.
//!
//! A site is labelled liquefied exactly when its motion carries high energy,
//! its mean SPT is low and its water table is shallow. Strong motions are
//! also low-frequency, so the rule stays visible after energy normalization
//! removes absolute amplitude from the spectrum.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::records::{Label, SiteRecord, SoilLayer, SoilType, N_LAYERS};
use super::sites_csv::sites_to_csv;
use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::signal::{encode_motion, motion_to_csv, MotionInput, MotionRecord, SpectralConfig};

/// `sum(a^2) * dt` above this counts as high energy (units g^2 s).
pub const ENERGY_THRESHOLD: f64 = 0.05;
pub const SPT_THRESHOLD: f64 = 15.0;
pub const WT_THRESHOLD: f64 = 3.0;

pub fn motion_energy(m: &MotionRecord<f64>) -> f64 {
    m.samples.iter().map(|a| a * a).sum::<f64>() * m.dt
}

pub fn liquefaction_rule(energy: f64, mean_spt: f64, wt_depth: f64) -> bool {
    energy > ENERGY_THRESHOLD && mean_spt < SPT_THRESHOLD && wt_depth < WT_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_sites: usize,
    pub n_motions: usize,
    pub n_strong: usize,
    pub positive_fraction: f64,
    pub dt: f64,
    pub duration: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { n_sites: 165, n_motions: 11, n_strong: 6, positive_fraction: 0.5, dt: 0.01, duration: 20.0, seed: 2024 }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub sites: Vec<SiteRecord>,
    pub motions: Vec<MotionRecord<f64>>,
}

fn synth_motion(id: String, strong: bool, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<MotionRecord<f64>> {
    let (pga, f0) = if strong {
        (rng.random_range(0.3..0.6), rng.random_range(1.0..3.0))
    } else {
        (rng.random_range(0.03..0.09), rng.random_range(6.0..10.0))
    };
    let n = (cfg.duration / cfg.dt).round() as usize;
    let tp = rng.random_range(3.0..5.0);
    let comps: Vec<(f64, f64, f64)> =
        [(0.7, 0.5), (1.0, 1.0), (1.4, 0.5)].iter().map(|&(r, w)| (r * f0, w, rng.random_range(0.0..2.0 * PI))).collect();
    let mut a: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 * cfg.dt;
            let env = (t / tp).powi(2) * (2.0 * (1.0 - t / tp)).exp();
            let s: f64 = comps.iter().map(|&(f, w, ph)| w * (2.0 * PI * f * t + ph).sin()).sum();
            env * (s + rng.random_range(-0.05..0.05))
        })
        .collect();
    let peak = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for x in &mut a {
        *x *= pga / peak;
    }
    MotionRecord::new(id, a, cfg.dt)
}

fn synth_site(
    id: String,
    motion: &MotionRecord<f64>,
    energy: f64,
    low_spt: bool,
    shallow: bool,
    rng: &mut impl Rng,
) -> SiteRecord {
    let (layers, mean) = loop {
        let level = if low_spt { rng.random_range(4.0..11.0) } else { rng.random_range(19.0..32.0) };
        let layers: [SoilLayer; N_LAYERS] = std::array::from_fn(|i| {
            let n = (level + 0.4 * (i as f64 - 4.5) + rng.random_range(-3.0..3.0)).max(0.0).round();
            let soil_type = match rng.random_range(0..3) {
                0 => SoilType::Sand,
                1 => SoilType::SiltySand,
                _ => SoilType::Clay,
            };
            SoilLayer { spt_n: n, soil_type }
        });
        let mean = layers.iter().map(|l| l.spt_n).sum::<f64>() / N_LAYERS as f64;
        if (low_spt && mean <= SPT_THRESHOLD - 2.5) || (!low_spt && mean >= SPT_THRESHOLD + 2.5) {
            break (layers, mean);
        }
    };
    let wt_depth = if shallow { rng.random_range(0.5..2.5) } else { rng.random_range(3.5..8.0) };
    let label = Label::from(liquefaction_rule(energy, mean, wt_depth));
    SiteRecord {
        site_id: id,
        layers,
        vs30: 110.0 + 5.0 * mean + rng.random_range(-15.0..15.0),
        dist_epi: rng.random_range(2.0..60.0),
        wt_depth,
        dist_water: rng.random_range(5.0..1500.0),
        motion_id: motion.id.clone(),
        label,
        null_twin: false,
    }
}

impl SyntheticCorpus {
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        if cfg.n_strong == 0 || cfg.n_strong >= cfg.n_motions {
            return Err(Error::Config("need at least one strong and one weak motion".into()));
        }
        if !(0.0..=1.0).contains(&cfg.positive_fraction) {
            return Err(Error::Config(format!("positive fraction {} outside [0, 1]", cfg.positive_fraction)));
        }
        let mut rng = seeded(cfg.seed);
        let motions: Vec<MotionRecord<f64>> = (0..cfg.n_motions)
            .map(|i| synth_motion(format!("eq{:02}", i + 1), i < cfg.n_strong, cfg, &mut rng))
            .collect::<Result<_>>()?;
        let energy: Vec<f64> = motions.iter().map(motion_energy).collect();
        let strong: Vec<usize> = (0..motions.len()).filter(|&i| energy[i] > ENERGY_THRESHOLD).collect();
        let weak: Vec<usize> = (0..motions.len()).filter(|&i| energy[i] <= ENERGY_THRESHOLD).collect();
        if strong.len() != cfg.n_strong {
            return Err(Error::State("synthetic motion energies straddle the threshold".into()));
        }
        let n_pos = (cfg.n_sites as f64 * cfg.positive_fraction).round() as usize;
        let mut sites = Vec::with_capacity(cfg.n_sites);
        for i in 0..cfg.n_sites {
            // negatives fail a random non-empty subset of the three conditions
            let (hi_e, low_spt, shallow) = if i < n_pos {
                (true, true, true)
            } else {
                let fail = rng.random_range(1u8..8);
                (fail & 1 == 0, fail & 2 == 0, fail & 4 == 0)
            };
            let pool = if hi_e { &strong } else { &weak };
            let m = pool[rng.random_range(0..pool.len())];
            sites.push(synth_site(format!("S{:03}", i + 1), &motions[m], energy[m], low_spt, shallow, &mut rng));
        }
        // interleave classes so file order carries no label information
        let mut order: Vec<usize> = (0..sites.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut shuffled: Vec<SiteRecord> = order.iter().map(|&i| sites[i].clone()).collect();
        for (i, s) in shuffled.iter_mut().enumerate() {
            s.site_id = format!("S{:03}", i + 1);
        }
        Ok(Self { sites: shuffled, motions })
    }

    pub fn dataset(&self, spectral: SpectralConfig) -> Result<Dataset> {
        let mut motions = BTreeMap::new();
        for m in &self.motions {
            motions.insert(m.id.clone(), encode_motion(MotionInput::Record(m), &spectral)?);
        }
        Dataset::new(self.sites.clone(), motions, spectral)
    }

    /// Writes `sites.csv` and `motions/<id>.csv` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let motions_dir = dir.join("motions");
        std::fs::create_dir_all(&motions_dir)?;
        std::fs::write(dir.join("sites.csv"), sites_to_csv(&self.sites)?)?;
        for m in &self.motions {
            std::fs::write(motions_dir.join(format!("{}.csv", m.id)), motion_to_csv(m))?;
        }
        Ok(())
    }
}
