use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{EqChannels, ModelConfig};
use crate::data::{SiteFeatures, N_LAYERS, N_SITE_FEATURES};
use crate::error::{Error, Result};
use crate::nn::{
    adaptive_avg_pool, eq_encoder_block, positional_encoding, soil_encoder_block, EqBlockParams, LinearParams, Mode,
    ParamStore, SoilBlockParams, Tape, Tensor, Var, LEAKY_SLOPE,
};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::signal::Spectrum;

/// One model-ready sample: spectrum bins plus standardized site values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInput<T = f64> {
    pub spectrum: Vec<T>,
    pub spt: [T; N_LAYERS],
    pub soil: [T; N_LAYERS],
    pub site: [T; N_SITE_FEATURES],
}

impl<T: Scalar> ModelInput<T> {
    pub fn new(spectrum: &Spectrum<f64>, f: &SiteFeatures) -> Self {
        Self {
            spectrum: spectrum.bins.iter().map(|&b| T::of(b)).collect(),
            spt: f.spt.map(T::of),
            soil: f.soil.map(T::of),
            site: f.site.map(T::of),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction<T = f64> {
    /// `[p_noliq, p_liq]`
    pub p: [T; 2],
    pub logits: [T; 2],
}

impl<T: Scalar> Prediction<T> {
    pub fn p_liq(&self) -> T {
        self.p[1]
    }

    /// Argmax class; an exact tie goes to class 0.
    pub fn class(&self) -> usize {
        usize::from(self.p[1] > self.p[0])
    }
}

/// A batch with repeated spectra collapsed so each is encoded once.
#[derive(Clone, Debug)]
pub struct Batch<T = f64> {
    pub spectra: Vec<Vec<T>>,
    pub spectrum_index: Vec<usize>,
    pub spt: Vec<T>,
    pub soil: Vec<T>,
    pub site: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new<'a>(inputs: impl IntoIterator<Item = &'a ModelInput<T>>) -> Self {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut b = Batch { spectra: Vec::new(), spectrum_index: Vec::new(), spt: Vec::new(), soil: Vec::new(), site: Vec::new() };
        for x in inputs {
            let key: Vec<u64> = x.spectrum.iter().map(|v| v.as_f64().to_bits()).collect();
            let next = b.spectra.len();
            let idx = *seen.entry(key).or_insert(next);
            if idx == next {
                b.spectra.push(x.spectrum.clone());
            }
            b.spectrum_index.push(idx);
            b.spt.extend_from_slice(&x.spt);
            b.soil.extend_from_slice(&x.soil);
            b.site.extend_from_slice(&x.site);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.spectrum_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectrum_index.is_empty()
    }
}

#[derive(Clone, Debug)]
struct Layout {
    soil_proj: LinearParams,
    soil_blocks: Vec<SoilBlockParams>,
    eq_proj: LinearParams,
    eq_blocks: Vec<EqBlockParams>,
    eq_fc_out: LinearParams,
    eq_fc1: LinearParams,
    head1: LinearParams,
    head2: LinearParams,
    head3: LinearParams,
}

/// Network parameters together with the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f64> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    layout: Layout,
    soil_pe: Tensor<T>,
    eq_pe: Tensor<T>,
}

/// Vars produced by one batched forward pass.
pub struct ForwardVars {
    pub probs: Var,
    pub logits: Var,
}

const PREDICT_CHUNK: usize = 128;

impl<T: Scalar> Model<T> {
    /// Glorot-initialized model seeded from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let soil_proj = LinearParams::init(&mut store, "soil.proj", 2, d, &mut rng);
        let soil_blocks = (0..cfg.soil_loops)
            .map(|i| SoilBlockParams::init(&mut store, &format!("soil.block{i}"), d, cfg.d_ff, &mut rng))
            .collect();
        let eq_proj = LinearParams::init(&mut store, "eq.proj", cfg.eq_channels.count(), d, &mut rng);
        let eq_blocks =
            (0..cfg.eq_loops).map(|i| EqBlockParams::init(&mut store, &format!("eq.block{i}"), d, &mut rng)).collect();
        let eq_fc_out = LinearParams::init(&mut store, "eq.fc_out", d, d, &mut rng);
        let eq_fc1 = LinearParams::init(&mut store, "eq.fc1", d, d, &mut rng);
        let head1 = LinearParams::init(&mut store, "head.w1", cfg.fused_width(), cfg.h1, &mut rng);
        let head2 = LinearParams::init(&mut store, "head.w2", cfg.h1 + N_SITE_FEATURES, cfg.h2, &mut rng);
        let head3 = LinearParams::init(&mut store, "head.w3", cfg.h2, 2, &mut rng);
        let layout = Layout { soil_proj, soil_blocks, eq_proj, eq_blocks, eq_fc_out, eq_fc1, head1, head2, head3 };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            layout,
            soil_pe: positional_encoding(cfg.l_soil, d)?,
            eq_pe: positional_encoding(cfg.l_spec(), d)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Earthquake stream for `[U, L_spec]` unique spectra: `[U, 10, 64]`.
    pub fn eq_stream(&self, tape: &mut Tape<'_, T>, spectra: &[Vec<T>]) -> Result<Var> {
        let (cfg, lay) = (&self.cfg, &self.layout);
        let l = cfg.l_spec();
        let c = cfg.eq_channels.count();
        let mut data = Vec::with_capacity(spectra.len() * l * c);
        for s in spectra {
            if s.len() != l {
                return Err(Error::Shape(format!("spectrum of length {} for L_spec {l}", s.len())));
            }
            match cfg.eq_channels {
                EqChannels::Magnitude => data.extend_from_slice(s),
                EqChannels::MagnitudeFrequency => {
                    for (i, &v) in s.iter().enumerate() {
                        data.push(v);
                        data.push(T::of((i as f64 + 0.5) / l as f64));
                    }
                }
            }
        }
        let x = tape.input(Tensor::new(vec![spectra.len(), l, c], data)?);
        let x = lay.eq_proj.forward(tape, x)?;
        let mut x = tape.add_const(x, &self.eq_pe)?;
        let spec = cfg.eq_block()?;
        for block in &lay.eq_blocks {
            x = eq_encoder_block(tape, x, &spec, block)?;
        }
        let h = lay.eq_fc_out.forward(tape, x)?;
        let h = tape.leaky_relu(h, T::of(LEAKY_SLOPE));
        let h = lay.eq_fc1.forward(tape, h)?;
        adaptive_avg_pool(tape, h, cfg.l_pool)
    }

    /// Soil stream for `n` profiles given flat `[n, 10]` SPT and token values: `[n, 10, 64]`.
    pub fn soil_stream(&self, tape: &mut Tape<'_, T>, spt: &[T], soil: &[T], mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        let (cfg, lay) = (&self.cfg, &self.layout);
        if spt.len() != soil.len() || spt.len() % cfg.l_soil != 0 {
            return Err(Error::Shape(format!("{} SPT and {} soil values for {} layers", spt.len(), soil.len(), cfg.l_soil)));
        }
        let n = spt.len() / cfg.l_soil;
        let data = spt.iter().zip(soil).flat_map(|(&a, &b)| [a, b]).collect();
        let x = tape.input(Tensor::new(vec![n, cfg.l_soil, 2], data)?);
        let x = lay.soil_proj.forward(tape, x)?;
        let mut x = tape.add_const(x, &self.soil_pe)?;
        let spec = cfg.soil_block()?;
        for block in &lay.soil_blocks {
            x = soil_encoder_block(tape, x, &spec, block, mode, rng)?;
        }
        Ok(x)
    }

    /// Full network on a batch; dropout masks draw from `rng` in train mode.
    pub fn forward(&self, tape: &mut Tape<'_, T>, batch: &Batch<T>, mode: Mode, rng: &mut impl Rng) -> Result<ForwardVars> {
        let (cfg, lay) = (&self.cfg, &self.layout);
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if batch.site.len() != n * N_SITE_FEATURES {
            return Err(Error::Shape(format!("{} site values for {n} samples", batch.site.len())));
        }
        let h_soil = self.soil_stream(tape, &batch.spt, &batch.soil, mode, rng)?;
        let h_eq = if cfg.use_eq_stream {
            let unique = self.eq_stream(tape, &batch.spectra)?;
            tape.gather(unique, batch.spectrum_index.clone())?
        } else {
            tape.input(Tensor::zeros(&[n, cfg.l_pool, cfg.d_model]))
        };
        let fused = tape.concat_last(h_soil, h_eq)?;
        let flat = tape.reshape(fused, &[n, cfg.fused_width()])?;
        let h1 = lay.head1.forward(tape, flat)?;
        let h1 = tape.leaky_relu(h1, T::of(LEAKY_SLOPE));
        let site = if cfg.use_site_stream {
            Tensor::new(vec![n, N_SITE_FEATURES], batch.site.clone())?
        } else {
            Tensor::zeros(&[n, N_SITE_FEATURES])
        };
        let site = tape.input(site);
        let h = tape.concat_last(h1, site)?;
        let h2 = lay.head2.forward(tape, h)?;
        let h2 = tape.leaky_relu(h2, T::of(LEAKY_SLOPE));
        let logits = lay.head3.forward(tape, h2)?;
        let probs = tape.softmax(logits);
        Ok(ForwardVars { probs, logits })
    }

    /// Eval-mode predictions, in input order.
    pub fn predict(&self, inputs: &[ModelInput<T>]) -> Result<Vec<Prediction<T>>> {
        let mut out = Vec::with_capacity(inputs.len());
        // eval mode never draws from the rng
        let mut rng = seeded(0);
        for chunk in inputs.chunks(PREDICT_CHUNK) {
            let batch = Batch::new(chunk);
            let mut tape = Tape::new(&self.store);
            let vars = self.forward(&mut tape, &batch, Mode::Eval, &mut rng)?;
            let (p, z) = (tape.value(vars.probs), tape.value(vars.logits));
            for i in 0..batch.len() {
                out.push(Prediction { p: [p.data()[2 * i], p.data()[2 * i + 1]], logits: [z.data()[2 * i], z.data()[2 * i + 1]] });
            }
        }
        Ok(out)
    }

    pub fn predict_one(&self, input: &ModelInput<T>) -> Result<Prediction<T>> {
        Ok(self.predict(std::slice::from_ref(input))?[0])
    }

    /// Soil encoder output `[10, 64]` for one standardized profile.
    pub fn soil_encoder_forward(&self, spt: &[T; N_LAYERS], soil: &[T; N_LAYERS], mode: Mode, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.store);
        let v = self.soil_stream(&mut tape, spt, soil, mode, rng)?;
        tape.value(v).clone().reshape(&[self.cfg.l_soil, self.cfg.d_model])
    }

    /// Earthquake encoder output `[10, 64]` for one spectrum.
    pub fn eq_encoder_forward(&self, spectrum: &[T]) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.store);
        let v = self.eq_stream(&mut tape, &[spectrum.to_vec()])?;
        tape.value(v).clone().reshape(&[self.cfg.l_pool, self.cfg.d_model])
    }

    /// Replaces every parameter value, matched by name and shape.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Checkpoint(format!("{} tensors for a model with {}", values.len(), self.store.len())));
        }
        let mut seen = vec![false; self.store.len()];
        for (name, t) in values {
            let id = self.store.find(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if std::mem::replace(&mut seen[id.0], true) {
                return Err(Error::Checkpoint(format!("parameter `{name}` given twice")));
            }
            let p = self.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), p.value.shape())));
            }
            p.value = t;
        }
        Ok(())
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut m = Model::<U>::init(&self.cfg)?;
        m.load_values(self.store.iter().map(|(_, name, p)| (name.to_string(), p.value.cast())).collect())?;
        Ok(m)
    }
}
