use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockLayout, EncoderBlockSpec};
use crate::signal::SpectralConfig;

/// Channels fed to the earthquake encoder per spectral bin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqChannels {
    /// Normalized magnitude only.
    #[default]
    Magnitude,
    /// Magnitude plus the bin's centre frequency divided by `f_max`.
    MagnitudeFrequency,
}

impl EqChannels {
    pub fn count(self) -> usize {
        match self {
            Self::Magnitude => 1,
            Self::MagnitudeFrequency => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub soil_heads: usize,
    pub soil_loops: usize,
    pub eq_heads: usize,
    pub eq_loops: usize,
    pub use_eq_stream: bool,
    pub use_site_stream: bool,
    pub d_model: usize,
    pub d_ff: usize,
    pub l_soil: usize,
    pub l_pool: usize,
    pub spectral: SpectralConfig,
    pub eq_channels: EqChannels,
    pub h1: usize,
    pub h2: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            soil_heads: 4,
            soil_loops: 2,
            eq_heads: 2,
            eq_loops: 1,
            use_eq_stream: true,
            use_site_stream: true,
            d_model: 64,
            d_ff: 128,
            l_soil: 10,
            l_pool: 10,
            spectral: SpectralConfig::default(),
            eq_channels: EqChannels::Magnitude,
            h1: 256,
            h2: 64,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.soil_block()?;
        self.eq_block()?;
        if self.l_soil != 10 || self.l_pool != 10 {
            return Err(Error::Config(format!(
                "both streams must have length 10 (soil {}, pooled {})",
                self.l_soil, self.l_pool
            )));
        }
        if self.spectral.len < self.l_pool {
            return Err(Error::Config(format!("spectrum length {} is shorter than {}", self.spectral.len, self.l_pool)));
        }
        if self.h1 == 0 || self.h2 == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }

    pub fn soil_block(&self) -> Result<EncoderBlockSpec> {
        EncoderBlockSpec::new(self.d_model, self.soil_heads, self.d_ff, self.dropout_rate, BlockLayout::SoilStyle)
    }

    pub fn eq_block(&self) -> Result<EncoderBlockSpec> {
        EncoderBlockSpec::new(self.d_model, self.eq_heads, 0, 0.0, BlockLayout::EqStyle)
    }

    pub fn l_spec(&self) -> usize {
        self.spectral.len
    }

    /// Width of the flattened fused sequence.
    pub fn fused_width(&self) -> usize {
        self.l_pool * 2 * self.d_model
    }
}

/// Scalar parameter count, summed layer by layer from the configuration.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let linear = |i: usize, o: usize| i * o + o;
    let attn = 4 * d * d;
    let norm = 2 * d;
    let soil_block = attn + norm + linear(d, cfg.d_ff) + linear(cfg.d_ff, d) + norm;
    let eq_block = attn + norm;
    linear(2, d)
        + cfg.soil_loops * soil_block
        + linear(cfg.eq_channels.count(), d)
        + cfg.eq_loops * eq_block
        + 2 * linear(d, d)
        + linear(cfg.fused_width(), cfg.h1)
        + linear(cfg.h1 + 4, cfg.h2)
        + linear(cfg.h2, 2)
}

/// The eight architecture variants of the ablation study, each derived
/// from `base` by one change. The last entry is `base` itself.
pub fn ablation_configs(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("without ground motion", with(&|c| c.use_eq_stream = false)),
        ("without site features", with(&|c| c.use_site_stream = false)),
        ("soil encoder 8 heads", with(&|c| c.soil_heads = 8)),
        ("soil encoder 4 loops", with(&|c| c.soil_loops = 4)),
        ("soil encoder 1 head", with(&|c| c.soil_heads = 1)),
        ("earthquake encoder 8 heads", with(&|c| c.eq_heads = 8)),
        ("earthquake encoder 1 head", with(&|c| c.eq_heads = 1)),
        ("proposed", base.clone()),
    ]
}
