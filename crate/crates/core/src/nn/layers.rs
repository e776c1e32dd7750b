//! Transformer building blocks shared by the soil and earthquake encoders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Slope of the negative branch of every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Layer-norm variance stabilizer.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockLayout {
    /// Attention, residual, layer norm.
    EqStyle,
    /// Attention and FFN sub-layers with the outer dropout residual.
    SoilStyle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlockSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    pub dropout_rate: f64,
    pub layout: BlockLayout,
}

impl EncoderBlockSpec {
    pub fn new(d_model: usize, n_heads: usize, d_ff: usize, dropout_rate: f64, layout: BlockLayout) -> Result<Self> {
        let spec = Self { d_model, n_heads, d_ff, leaky_slope: LEAKY_SLOPE, ln_eps: LN_EPS, dropout_rate, layout };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide d_model {}", self.n_heads, self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Glorot-uniform matrix: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.random_range(-a..a)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), glorot_uniform(d_in, d_out, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }
}

/// Query, key, value and output projections; none carry a bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_model: usize, rng: &mut impl Rng) -> Self {
        let mut w = |suffix: &str| store.add(format!("{name}.{suffix}"), glorot_uniform(d_model, d_model, rng));
        let wq = w("wq");
        let wk = w("wk");
        let wv = w("wv");
        let wo = w("wo");
        Self { wq, wk, wv, wo }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnParams {
    pub inner: LinearParams,
    pub outer: LinearParams,
}

impl FfnParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        let inner = LinearParams::init(store, &format!("{name}.inner"), d_model, d_ff, rng);
        let outer = LinearParams::init(store, &format!("{name}.outer"), d_ff, d_model, rng);
        Self { inner, outer }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EqBlockParams {
    pub attn: AttentionParams,
    pub norm: LayerNormParams,
}

impl EqBlockParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_model: usize, rng: &mut impl Rng) -> Self {
        let attn = AttentionParams::init(store, &format!("{name}.attn"), d_model, rng);
        let norm = LayerNormParams::init(store, &format!("{name}.norm"), d_model);
        Self { attn, norm }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoilBlockParams {
    pub attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub ffn: FfnParams,
    pub norm2: LayerNormParams,
}

impl SoilBlockParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        let attn = AttentionParams::init(store, &format!("{name}.attn"), d_model, rng);
        let norm1 = LayerNormParams::init(store, &format!("{name}.norm1"), d_model);
        let ffn = FfnParams::init(store, &format!("{name}.ffn"), d_model, d_ff, rng);
        let norm2 = LayerNormParams::init(store, &format!("{name}.norm2"), d_model);
        Self { attn, norm1, ffn, norm2 }
    }
}

/// Sinusoidal table: `sin(pos / 10000^(2i/d))` on even columns and the
/// matching cosine on odd columns.
pub fn positional_encoding<T: Scalar>(len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even width, got {d_model}")));
    }
    let mut data = vec![T::zero(); len * d_model];
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = T::of(angle.sin());
            data[pos * d_model + 2 * i + 1] = T::of(angle.cos());
        }
    }
    Tensor::new(vec![len, d_model], data)
}

pub fn layer_norm<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, p: &LayerNormParams, eps: f64) -> Result<Var> {
    let (g, b) = (tape.param(p.gamma), tape.param(p.beta));
    tape.layer_norm(x, g, b, T::of(eps))
}

/// Self-attention over `x` (`[L, d]` or `[B, L, d]`), heads concatenated
/// and projected by the output matrix.
pub fn multi_head_attention<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, n_heads: usize, p: &AttentionParams) -> Result<Var> {
    let (wq, wk, wv, wo) = (tape.param(p.wq), tape.param(p.wk), tape.param(p.wv), tape.param(p.wo));
    let q = tape.linear(x, wq, None)?;
    let k = tape.linear(x, wk, None)?;
    let v = tape.linear(x, wv, None)?;
    let z = tape.attention(q, k, v, n_heads)?;
    tape.linear(z, wo, None)
}

/// Position-wise `W2 LeakyReLU(W1 x + b1) + b2`.
pub fn ffn<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, p: &FfnParams, slope: f64) -> Result<Var> {
    let h = p.inner.forward(tape, x)?;
    let h = tape.leaky_relu(h, T::of(slope));
    p.outer.forward(tape, h)
}

pub fn adaptive_avg_pool<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, out_len: usize) -> Result<Var> {
    tape.avg_pool(x, out_len)
}

/// Inverted dropout. Identity in eval mode or at rate 0.
pub fn dropout<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let n = tape.value(x).len();
    let mask = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
    tape.mask(x, mask)
}

/// `LayerNorm(x + MultiHead(x))`.
pub fn eq_encoder_block<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, spec: &EncoderBlockSpec, p: &EqBlockParams) -> Result<Var> {
    let a = multi_head_attention(tape, x, spec.n_heads, &p.attn)?;
    let s = tape.add(x, a)?;
    layer_norm(tape, s, &p.norm, spec.ln_eps)
}

/// `out = x + LN2(FFN(LN1(x + MultiHead(x))))`, then `x + Dropout(out)`.
pub fn soil_encoder_block<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    spec: &EncoderBlockSpec,
    p: &SoilBlockParams,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    let a = multi_head_attention(tape, x, spec.n_heads, &p.attn)?;
    let s = tape.add(x, a)?;
    let n1 = layer_norm(tape, s, &p.norm1, spec.ln_eps)?;
    let f = ffn(tape, n1, &p.ffn, spec.leaky_slope)?;
    let n2 = layer_norm(tape, f, &p.norm2, spec.ln_eps)?;
    let out = tape.add(x, n2)?;
    let dropped = dropout(tape, out, spec.dropout_rate, mode, rng)?;
    tape.add(x, dropped)
}
