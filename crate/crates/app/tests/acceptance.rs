//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Set `LQTF_BLESS=1` to rewrite the golden
//! checkpoint instead of comparing against it.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use lqtf::data::synthetic::{SyntheticConfig, SyntheticCorpus};
use lqtf::data::{
    augment_null_motion, cpt_coefficients, cpt_to_spt, standardize_site, stratified_split, CptSample, Dataset, SiteRow,
    Split, ATMOSPHERIC_PRESSURE_MPA, IC_CLAY, IC_SAND, IC_SILTY_SAND,
};
use lqtf::explain::{
    sensitivity_grid, shapley_exact, shapley_sample, Attribution, Background, Coalition, CoalitionModel, ModelGame,
    SensitivityGrid, N_GROUPS,
};
use lqtf::model::{
    ablation_configs, checkpoint_bytes, load_checkpoint, save_checkpoint, Batch, EqChannels, Model, ModelConfig,
    ModelInput,
};
use lqtf::nn::{
    eq_encoder_block, ffn, multi_head_attention, soil_encoder_block, BlockLayout, EncoderBlockSpec, EqBlockParams,
    FfnParams, Mode, ParamId, ParamStore, SoilBlockParams, Tape, Tensor, Var, AttentionParams,
};
use lqtf::rng::seeded;
use lqtf::signal::{encode_motion, fft_in_place, fft_magnitude, MotionInput, MotionRecord, SpectralConfig};
use lqtf::train::{ablation_csv, ablation_study, cross_validate, evaluate, inputs_for, train, Metrics, TrainConfig};
use lqtf_app::api::ErrorBody;
use lqtf_app::bundle::{background_subset, PredictResponse};
use lqtf_app::service::{router, ServiceState};
use lqtf_app::{ModelBundle, MotionLibrary};
use num_complex::Complex;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use tower::ServiceExt;

const GRAD_SEEDS: u64 = 20;
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL_PRIMITIVE: f64 = 1e-4;
const GRAD_TOL_END_TO_END: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const FFT_MAX_LEN: usize = 64;
const FFT_TOL: f64 = 1e-9;
const PARSEVAL_TOL: f64 = 1e-6;
const FFT_BUDGET: Duration = Duration::from_secs(10);

const SHAPLEY_EXACT_TOL: f64 = 1e-9;
const SHAPLEY_DUMMY_TOL: f64 = 1e-12;
const SHAPLEY_SIGMAS: f64 = 3.0;
const SHAPLEY_PERMS: usize = 2000;
const SHAPLEY_GROUPS: usize = 12;
const SHAPLEY_BUDGET: Duration = Duration::from_secs(300);

const SHAPE_CASES: usize = 100;
const SHAPE_SUM_TOL: f64 = 1e-12;
const SHAPE_BUDGET: Duration = Duration::from_secs(60);

const PIPELINE_SEEDS: u64 = 10;
const PIPELINE_MIN_ACCURACY: f64 = 0.90;
const PIPELINE_MIN_PASSING: usize = 8;
const PIPELINE_VAL_FRACTION: f64 = 0.05;
const CV_FOLDS: usize = 10;
const CV_MAX_GAP: f64 = 0.10;
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);

const ZERO_MOTION_MIN_SHARE: f64 = 0.90;

const ABLATION_EPOCHS: usize = 50;
const ABLATION_PERTURBATIONS: u64 = 20;

const CPT_TOL: f64 = 1e-9;

const ROUND_TRIP_TOL: f64 = 1e-12;

const BATCH_SITES: usize = 1000;
const BATCH_BUDGET: Duration = Duration::from_secs(10);

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let over = budget.is_some_and(|b| took > b);
        let (ok, mut detail) = match outcome {
            Ok(d) => (!over, d),
            Err(d) => (false, d),
        };
        if let (true, Some(b)) = (over, budget) {
            detail.push_str(&format!("; over the {:.0} s budget", b.as_secs_f64()));
        }
        if !ok {
            self.failures += 1;
        }
        println!("{} {name} ({:.1} s): {detail}", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64());
    }
}

// ---------------------------------------------------------------- gradients

type Forward = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> lqtf::Result<Var>;

/// Worst relative error between the tape gradient of a scalar and central
/// differences, over every entry of every input.
fn grad_error(inputs: &[Tensor], forward: &Forward) -> lqtf::Result<f64> {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs.iter().enumerate().map(|(i, t)| store.add(format!("x{i}"), t.clone())).collect();
    let eval = |store: &ParamStore| -> lqtf::Result<f64> {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let out = forward(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let grads = {
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let out = forward(&mut tape, &vars)?;
        tape.backward(out)?
    };
    let mut worst: f64 = 0.0;
    for &id in &ids {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            let h = GRAD_STEP * orig.abs().max(1.0);
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let up = eval(&store)?;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let down = eval(&store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[j]);
            worst = worst.max(relative(analytic, numeric));
        }
    }
    Ok(worst)
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces any output to a scalar with fixed random weights.
fn project(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> lqtf::Result<Var> {
    let mut rng = seeded(seed ^ 0x5eed);
    let n = tape.value(out).len();
    tape.weighted_sum(out, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Inputs kept clear of the LeakyReLU kink so the finite difference
/// never straddles it.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

type Case = (&'static str, Vec<Tensor>, Box<Forward>);

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = seeded(seed);
    let r = &mut rng;
    let dropout_mask: Vec<f64> = (0..24).map(|_| if r.random::<f64>() < 0.3 { 0.0 } else { 1.0 / 0.7 }).collect();
    let gather_index: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
    let targets: Vec<f64> = (0..4).map(|_| f64::from(r.random_range(0u8..2))).collect();
    let constant = uniform(&[5], -1.0, 1.0, r);
    let d = 8;
    let cases: Vec<Case> = vec![
        ("matmul", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 5], -1.0, 1.0, r)], Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        })),
        ("linear", vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[4, 5], -1.0, 1.0, r), uniform(&[5], -1.0, 1.0, r)], Box::new(move |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, seed)
        })),
        ("add", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r)], Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, seed)
        })),
        ("add_const", vec![uniform(&[2, 5], -1.0, 1.0, r)], Box::new(move |t, v| {
            let y = t.add_const(v[0], &constant)?;
            project(t, y, seed)
        })),
        ("leaky_relu", vec![away_from_zero(&[3, 5], r)], Box::new(move |t, v| {
            let y = t.leaky_relu(v[0], 0.01);
            project(t, y, seed)
        })),
        ("softmax", vec![uniform(&[3, 4], -2.0, 2.0, r)], Box::new(move |t, v| {
            let y = t.softmax(v[0]);
            project(t, y, seed)
        })),
        ("layer_norm", vec![uniform(&[3, 6], -2.0, 2.0, r), uniform(&[6], 0.5, 1.5, r), uniform(&[6], -0.5, 0.5, r)], Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        })),
        ("attention", vec![uniform(&[2, 4, 6], -1.0, 1.0, r), uniform(&[2, 4, 6], -1.0, 1.0, r), uniform(&[2, 4, 6], -1.0, 1.0, r)], Box::new(move |t, v| {
            let y = t.attention(v[0], v[1], v[2], 2)?;
            project(t, y, seed)
        })),
        ("concat_last", vec![uniform(&[2, 3, 2], -1.0, 1.0, r), uniform(&[2, 3, 4], -1.0, 1.0, r)], Box::new(move |t, v| {
            let y = t.concat_last(v[0], v[1])?;
            project(t, y, seed)
        })),
        ("reshape", vec![uniform(&[2, 3, 4], -1.0, 1.0, r)], Box::new(move |t, v| {
            let y = t.reshape(v[0], &[6, 4])?;
            project(t, y, seed)
        })),
        ("mask", vec![uniform(&[4, 6], -1.0, 1.0, r)], Box::new(move |t, v| {
            let y = t.mask(v[0], dropout_mask.clone())?;
            project(t, y, seed)
        })),
        ("avg_pool", vec![uniform(&[2, 7, 3], -1.0, 1.0, r)], Box::new(move |t, v| {
            let y = t.avg_pool(v[0], 3)?;
            project(t, y, seed)
        })),
        ("gather", vec![uniform(&[3, 2, 2], -1.0, 1.0, r)], Box::new(move |t, v| {
            let y = t.gather(v[0], gather_index.clone())?;
            project(t, y, seed)
        })),
        ("bce", vec![uniform(&[4, 2], 0.05, 0.95, r)], Box::new(move |t, v| t.bce(v[0], &targets))),
        ("sum", vec![uniform(&[3, 3], -1.0, 1.0, r)], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("weighted_sum", vec![uniform(&[3, 3], -1.0, 1.0, r)], Box::new(move |t, v| project(t, v[0], seed))),
    ];
    let mut blocks: Vec<Case> = Vec::new();
    let x = uniform(&[2, 5, d], -1.0, 1.0, r);
    let mut layer_store = ParamStore::new();
    let attn = AttentionParams::init(&mut layer_store, "attn", d, r);
    let ff = FfnParams::init(&mut layer_store, "ffn", d, 12, r);
    let eq = EqBlockParams::init(&mut layer_store, "eq", d, r);
    let soil = SoilBlockParams::init(&mut layer_store, "soil", d, 12, r);
    // the layer parameters become leading inputs so their gradients are checked too
    let values: Vec<Tensor> = layer_store.iter().map(|(_, _, p)| p.value.clone()).collect();
    let n = values.len();
    let with_x = |mut v: Vec<Tensor>| {
        v.push(x.clone());
        v
    };
    blocks.push(("multi-head attention", with_x(values.clone()), Box::new(move |t, v| {
        let y = multi_head_attention(t, v[n], 2, &attn)?;
        project(t, y, seed)
    })));
    blocks.push(("feed-forward", with_x(values.clone()), Box::new(move |t, v| {
        let y = ffn(t, v[n], &ff, 0.01)?;
        project(t, y, seed)
    })));
    let eq_spec = EncoderBlockSpec::new(d, 2, 0, 0.0, BlockLayout::EqStyle).expect("valid spec");
    blocks.push(("earthquake block", with_x(values.clone()), Box::new(move |t, v| {
        let y = eq_encoder_block(t, v[n], &eq_spec, &eq)?;
        project(t, y, seed)
    })));
    let soil_spec = EncoderBlockSpec::new(d, 2, 12, 0.25, BlockLayout::SoilStyle).expect("valid spec");
    blocks.push(("soil block", with_x(values), Box::new(move |t, v| {
        let y = soil_encoder_block(t, v[n], &soil_spec, &soil, Mode::Train, &mut seeded(seed))?;
        project(t, y, seed)
    })));
    cases.into_iter().chain(blocks).collect()
}

fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 16,
        soil_heads: 2,
        eq_heads: 2,
        h1: 8,
        h2: 4,
        spectral: SpectralConfig { len: 16, ..SpectralConfig::default() },
        seed,
        ..ModelConfig::default()
    }
}

fn random_input(cfg: &ModelConfig, rng: &mut impl Rng) -> ModelInput {
    ModelInput {
        spectrum: (0..cfg.l_spec()).map(|_| rng.random::<f64>()).collect(),
        spt: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
        soil: std::array::from_fn(|_| f64::from(rng.random_range(1u8..=3))),
        site: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
    }
}

fn loss_of(m: &Model, batch: &Batch, targets: &[f64], seed: u64) -> lqtf::Result<f64> {
    let mut tape = Tape::new(m.params());
    let vars = m.forward(&mut tape, batch, Mode::Train, &mut seeded(seed))?;
    let l = tape.bce(vars.probs, targets)?;
    Ok(tape.value(l).data()[0])
}

fn end_to_end_error(seed: u64) -> lqtf::Result<f64> {
    let channels = if seed % 2 == 0 { EqChannels::Magnitude } else { EqChannels::MagnitudeFrequency };
    let cfg = ModelConfig { eq_channels: channels, ..tiny_model_config(seed) };
    let mut m = Model::<f64>::init(&cfg)?;
    let mut rng = seeded(seed);
    let xs: Vec<ModelInput> = (0..3).map(|_| random_input(&cfg, &mut rng)).collect();
    let batch = Batch::new(&xs);
    let targets: Vec<f64> = (0..3).map(|_| f64::from(rng.random_range(0u8..2))).collect();
    let dropout_seed = seed + 1000;
    let grads = {
        let mut tape = Tape::new(m.params());
        let vars = m.forward(&mut tape, &batch, Mode::Train, &mut seeded(dropout_seed))?;
        let l = tape.bce(vars.probs, &targets)?;
        tape.backward(l)?
    };
    let analytic: Vec<Option<Tensor>> = (0..m.params().len()).map(|i| grads.param(ParamId(i)).cloned()).collect();
    let mut worst: f64 = 0.0;
    for (pi, a) in analytic.iter().enumerate() {
        let id = ParamId(pi);
        for j in 0..m.params().value(id).len() {
            let theta = m.params().value(id).data()[j];
            let h = GRAD_STEP * theta.abs().max(1.0);
            m.params_mut().get_mut(id).value.data_mut()[j] = theta + h;
            let up = loss_of(&m, &batch, &targets, dropout_seed)?;
            m.params_mut().get_mut(id).value.data_mut()[j] = theta - h;
            let down = loss_of(&m, &batch, &targets, dropout_seed)?;
            m.params_mut().get_mut(id).value.data_mut()[j] = theta;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative(a.as_ref().map_or(0.0, |t| t.data()[j]), numeric));
        }
    }
    Ok(worst)
}

fn gradient_correctness() -> Outcome {
    let mut worst_primitive = (0.0, "", 0);
    for seed in 0..GRAD_SEEDS {
        for (name, inputs, forward) in primitive_cases(seed) {
            let e = grad_error(&inputs, forward.as_ref()).map_err(|e| format!("{name}: {e}"))?;
            if e > worst_primitive.0 {
                worst_primitive = (e, name, seed);
            }
        }
    }
    let mut worst_e2e: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        worst_e2e = worst_e2e.max(end_to_end_error(seed).map_err(fail)?);
    }
    let (wp, name, seed) = worst_primitive;
    check(
        wp <= GRAD_TOL_PRIMITIVE && worst_e2e <= GRAD_TOL_END_TO_END,
        format!(
            "{GRAD_SEEDS} seeds; worst primitive rel err {wp:.2e} ({name}, seed {seed}) <= {GRAD_TOL_PRIMITIVE:e}; \
             worst end-to-end {worst_e2e:.2e} <= {GRAD_TOL_END_TO_END:e}"
        ),
    )
}

// ---------------------------------------------------------------------- FFT

fn naive_dft(x: &[Complex<f64>]) -> Vec<Complex<f64>> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (t, v)| {
                let ang = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                acc + v * Complex::from_polar(1.0, ang)
            })
        })
        .collect()
}

fn fft_oracle() -> Outcome {
    let mut rng = seeded(64);
    let (mut worst_dft, mut worst_parseval): (f64, f64) = (0.0, 0.0);
    for len in 1..=FFT_MAX_LEN {
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let padded = len.next_power_of_two();
        let mut z: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        z.resize(padded, Complex::new(0.0, 0.0));
        let oracle = naive_dft(&z);
        let mut buf = z.clone();
        fft_in_place(&mut buf);
        for (a, b) in buf.iter().zip(&oracle) {
            worst_dft = worst_dft.max((a - b).norm());
        }
        let spec = fft_magnitude(&MotionRecord::new("x", x.clone(), 0.01).map_err(fail)?).map_err(fail)?;
        for (m, o) in spec.mags.iter().zip(&oracle) {
            worst_dft = worst_dft.max((m - o.norm()).abs());
        }
        let temporal: f64 = x.iter().map(|v| v * v).sum();
        let spectral = buf.iter().map(|c| c.norm_sqr()).sum::<f64>() / padded as f64;
        worst_parseval = worst_parseval.max((spectral - temporal).abs() / temporal.max(f64::MIN_POSITIVE));
    }
    check(
        worst_dft <= FFT_TOL && worst_parseval <= PARSEVAL_TOL,
        format!("lengths 1..={FFT_MAX_LEN}; max |FFT - DFT| {worst_dft:.2e} <= {FFT_TOL:e}; Parseval rel err {worst_parseval:.2e} <= {PARSEVAL_TOL:e}"),
    )
}

// ------------------------------------------------------------------ Shapley

/// `v(S) = f(x_S, 0)` for a polynomial with known Shapley values: a linear
/// part, pairwise products and one triple product. The last group appears
/// in no term.
struct PolyGame {
    x: Vec<f64>,
    linear: Vec<f64>,
    pairs: Vec<(usize, usize, f64)>,
    triple: (usize, usize, usize, f64),
}

impl PolyGame {
    fn random(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let n = SHAPLEY_GROUPS;
        let x = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut linear: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        linear[n - 1] = 0.0;
        let pairs = (0..6).map(|_| (rng.random_range(0..n - 1), rng.random_range(0..n - 1), rng.random_range(-1.0..1.0))).filter(|p| p.0 != p.1).collect();
        Self { x, linear, pairs, triple: (0, 3, 7, rng.random_range(-1.0..1.0)) }
    }

    fn value(&self, z: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(z).map(|(a, v)| a * v).sum();
        let pair: f64 = self.pairs.iter().map(|&(i, j, b)| b * z[i] * z[j]).sum();
        let (i, j, k, c) = self.triple;
        lin + pair + c * z[i] * z[j] * z[k]
    }

    /// Closed form: each monomial's value at `x` is shared equally by its variables.
    fn closed_form(&self) -> Vec<f64> {
        let x = &self.x;
        let mut phi: Vec<f64> = self.linear.iter().zip(x).map(|(a, v)| a * v).collect();
        for &(i, j, b) in &self.pairs {
            phi[i] += b * x[i] * x[j] / 2.0;
            phi[j] += b * x[i] * x[j] / 2.0;
        }
        let (i, j, k, c) = self.triple;
        for g in [i, j, k] {
            phi[g] += c * x[i] * x[j] * x[k] / 3.0;
        }
        phi
    }
}

impl CoalitionModel for PolyGame {
    fn n_groups(&self) -> usize {
        self.x.len()
    }

    fn evaluate(&self, coalitions: &[Coalition]) -> lqtf::Result<Vec<f64>> {
        Ok(coalitions
            .iter()
            .map(|&c| {
                let z: Vec<f64> = self.x.iter().enumerate().map(|(i, &v)| if c & (1 << i) != 0 { v } else { 0.0 }).collect();
                self.value(&z)
            })
            .collect())
    }
}

fn shapley_axioms() -> Outcome {
    let (mut worst_add, mut worst_dummy, mut worst_closed): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let (mut worst_sigma, mut covered, mut total) = (0.0f64, 0, 0);
    let dummy = SHAPLEY_GROUPS - 1;
    for seed in 0..5 {
        let game = PolyGame::random(seed);
        let all: Vec<usize> = (0..SHAPLEY_GROUPS).collect();
        let exact = shapley_exact(&game, &all).map_err(fail)?;
        worst_add = worst_add.max(exact.additivity_residual());
        worst_dummy = worst_dummy.max(exact.groups[dummy].phi.abs());
        for (a, b) in exact.phi().iter().zip(game.closed_form()) {
            worst_closed = worst_closed.max((a - b).abs());
        }
        let sampled = shapley_sample(&game, SHAPLEY_PERMS, seed).map_err(fail)?;
        worst_dummy = worst_dummy.max(sampled.groups[dummy].phi.abs());
        for (s, e) in sampled.groups.iter().zip(&exact.groups) {
            total += 1;
            let gap = (s.phi - e.phi).abs();
            if gap <= SHAPLEY_SIGMAS * s.std_err + 1e-12 {
                covered += 1;
            }
            if s.std_err > 0.0 {
                worst_sigma = worst_sigma.max(gap / s.std_err);
            }
        }
    }
    // the trained-network game restricted to a subset of groups
    let cfg = tiny_model_config(4);
    let model = Model::<f64>::init(&cfg).map_err(fail)?;
    let mut rng = seeded(4);
    let background = Background::new((0..8).map(|_| random_input(&cfg, &mut rng)).collect()).map_err(fail)?;
    let x = random_input(&cfg, &mut rng);
    let game = ModelGame::new(&model, &x, &background).map_err(fail)?;
    let active: Vec<usize> = (0..N_GROUPS).step_by(2).take(SHAPLEY_GROUPS).collect();
    let a = shapley_exact(&game, &active).map_err(fail)?;
    worst_add = worst_add.max(a.additivity_residual());
    check(
        worst_add <= SHAPLEY_EXACT_TOL && worst_dummy <= SHAPLEY_DUMMY_TOL && worst_closed <= SHAPLEY_EXACT_TOL && covered == total,
        format!(
            "additivity {worst_add:.1e} <= {SHAPLEY_EXACT_TOL:e}; dummy |phi| {worst_dummy:.1e} <= {SHAPLEY_DUMMY_TOL:e}; \
             exact vs closed form {worst_closed:.1e}; sampled within {SHAPLEY_SIGMAS} std_err for {covered}/{total} \
             (worst {worst_sigma:.2} std_err, {SHAPLEY_GROUPS} groups, {SHAPLEY_PERMS} perms)"
        ),
    )
}

// ------------------------------------------------------------------- shapes

fn shape_contract() -> Outcome {
    let mut rng = seeded(100);
    let mut worst: f64 = 0.0;
    for case in 0..SHAPE_CASES {
        let heads = [1, 2, 4, 8];
        let cfg = ModelConfig {
            soil_heads: heads[rng.random_range(0..4)],
            eq_heads: heads[rng.random_range(0..4)],
            soil_loops: rng.random_range(1..=4),
            eq_loops: rng.random_range(1..=2),
            eq_channels: if rng.random() { EqChannels::Magnitude } else { EqChannels::MagnitudeFrequency },
            spectral: SpectralConfig { len: [16, 32, 64][rng.random_range(0..3)], ..SpectralConfig::default() },
            seed: case as u64,
            ..ModelConfig::default()
        };
        let m = Model::<f64>::init(&cfg).map_err(fail)?;
        let x = random_input(&cfg, &mut rng);
        let soil = m.soil_encoder_forward(&x.spt, &x.soil, Mode::Eval, &mut rng).map_err(fail)?;
        let eq = m.eq_encoder_forward(&x.spectrum).map_err(fail)?;
        let mut tape = Tape::new(m.params());
        let b = Batch::new([&x]);
        let h = m.soil_stream(&mut tape, &b.spt, &b.soil, Mode::Eval, &mut rng).map_err(fail)?;
        let e = m.eq_stream(&mut tape, &b.spectra).map_err(fail)?;
        let g = tape.gather(e, b.spectrum_index.clone()).map_err(fail)?;
        let fused = tape.concat_last(h, g).map_err(fail)?;
        let fused_shape = tape.value(fused).shape().to_vec();
        let p = m.predict_one(&x).map_err(fail)?;
        let shapes_ok = soil.shape() == [10, 64] && eq.shape() == [10, 64] && fused_shape == [1, 10, 128];
        if !shapes_ok {
            return Err(format!("case {case}: soil {:?}, eq {:?}, combined {fused_shape:?}", soil.shape(), eq.shape()));
        }
        worst = worst.max((p.p.iter().sum::<f64>() - 1.0).abs());
    }
    check(
        worst <= SHAPE_SUM_TOL,
        format!("{SHAPE_CASES} configs: soil 10x64, earthquake 10x64, combined 10x128, 2-way output; max |sum - 1| {worst:.1e}"),
    )
}

// ----------------------------------------------------------------- pipeline

struct Trained {
    corpus: SyntheticCorpus,
    ds: Dataset,
    split: Split,
    model: Model,
}

fn model_config(seed: u64) -> ModelConfig {
    ModelConfig { seed, ..ModelConfig::default() }
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..TrainConfig::default() }
}

/// Corpus generation, spectral encoding, augmentation, split and
/// standardization, then training, validation scoring and one explanation.
fn desk_pipeline(seed: u64) -> lqtf::Result<(Trained, Metrics)> {
    let corpus = SyntheticCorpus::generate(&SyntheticConfig::default())?;
    let mcfg = model_config(seed);
    let augmented = augment_null_motion(&corpus.dataset(mcfg.spectral)?)?;
    let split = stratified_split(&augmented.labels(), PIPELINE_VAL_FRACTION, seed)?;
    let ds = augmented.fit_standardizer(&split.train)?;
    let out = train::<f64>(&ds, &split, &mcfg, &train_config(seed), None)?;
    let metrics = evaluate(&out.best, &ds, &split.val)?;
    let (train_x, _) = inputs_for::<f64>(&ds, &split.train)?;
    let (val_x, _) = inputs_for::<f64>(&ds, &split.val)?;
    let background = Background::new(background_subset(&train_x))?;
    let game = ModelGame::new(&out.best, &val_x[0], &background)?;
    shapley_sample(&game, SHAPLEY_PERMS, seed)?;
    Ok((Trained { corpus, ds, split, model: out.best }, metrics))
}

fn pipeline(trained: &mut Option<Trained>) -> Outcome {
    let sweep = Instant::now();
    let desk = Instant::now();
    let (first, first_metrics) = desk_pipeline(1).map_err(fail)?;
    let desk_time = desk.elapsed();
    let n_sites = first.corpus.sites.len();
    let n_records = first.ds.len();
    let mut accuracies = vec![first_metrics.accuracy];
    let augmented = augment_null_motion(&first.corpus.dataset(model_config(1).spectral).map_err(fail)?).map_err(fail)?;
    *trained = Some(first);
    for seed in 2..=PIPELINE_SEEDS {
        let split = stratified_split(&augmented.labels(), PIPELINE_VAL_FRACTION, seed).map_err(fail)?;
        let ds = augmented.fit_standardizer(&split.train).map_err(fail)?;
        let out = train::<f64>(&ds, &split, &model_config(seed), &train_config(seed), None).map_err(fail)?;
        accuracies.push(out.best_metrics.accuracy);
    }
    let passing = accuracies.iter().filter(|&&a| a >= PIPELINE_MIN_ACCURACY).count();
    let split_mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let cv = cross_validate(&augmented, &model_config(1), &train_config(1), CV_FOLDS).map_err(fail)?;
    let gap = (cv.mean_accuracy - split_mean).abs();
    let sweep_time = sweep.elapsed();
    let listed: Vec<String> = accuracies.iter().map(|a| format!("{a:.3}")).collect();
    check(
        n_sites == 165
            && n_records == 330
            && passing >= PIPELINE_MIN_PASSING
            && gap <= CV_MAX_GAP
            && desk_time <= PIPELINE_BUDGET,
        format!(
            "{n_sites} sites augmented to {n_records}; best val accuracy per seed [{}], {passing}/{PIPELINE_SEEDS} >= {PIPELINE_MIN_ACCURACY}; \
             {CV_FOLDS}-fold CV mean {:.3} vs split mean {split_mean:.3} (gap {gap:.3} <= {CV_MAX_GAP}); \
             one desk pipeline {:.1} min <= {:.0} min; whole sweep {:.1} min",
            listed.join(", "),
            cv.mean_accuracy,
            desk_time.as_secs_f64() / 60.0,
            PIPELINE_BUDGET.as_secs_f64() / 60.0,
            sweep_time.as_secs_f64() / 60.0,
        ),
    )
}

fn needs(trained: &Option<Trained>) -> Result<&Trained, String> {
    trained.as_ref().ok_or_else(|| "no trained model: the pipeline did not complete".to_string())
}

fn zero_motion(trained: &Option<Trained>) -> Outcome {
    let t = needs(trained)?;
    let st = t.ds.standardizer.as_ref().ok_or("dataset is not standardized")?;
    let (mut below, mut exact) = (0, 0);
    for site in &t.corpus.sites {
        let motion = t.corpus.motions.iter().find(|m| m.id == site.motion_id).ok_or("site motion missing")?;
        let grid = sensitivity_grid(&t.model, st, site, motion, &[0.0, 1.0], &[1.0]).map_err(fail)?;
        if grid.p[0][0] < 0.5 {
            below += 1;
        }
        let spectrum = encode_motion(MotionInput::Record(motion), &t.model.config().spectral).map_err(fail)?;
        let plain = t.model.predict_one(&ModelInput::new(&spectrum, &standardize_site(st, site).map_err(fail)?)).map_err(fail)?;
        if grid.p[1][0].to_bits() == plain.p_liq().to_bits() {
            exact += 1;
        }
    }
    let n = t.corpus.sites.len();
    let share = below as f64 / n as f64;
    check(
        share >= ZERO_MOTION_MIN_SHARE && exact == n,
        format!("p_liq < 0.5 at PGA factor 0 for {below}/{n} sites ({:.1}% >= {:.0}%); factor 1 bit-identical to predict for {exact}/{n}", 100.0 * share, 100.0 * ZERO_MOTION_MIN_SHARE),
    )
}

fn ablation(trained: &Option<Trained>) -> Outcome {
    let t = needs(trained)?;
    let tcfg = TrainConfig { epochs: ABLATION_EPOCHS, ..train_config(1) };
    let rows = ablation_study(&t.ds, &t.split, &model_config(1), &tcfg).map_err(fail)?;
    let csv = ablation_csv(&rows).map_err(fail)?;
    let reported = rows.len() == 8 && csv.lines().count() == 9 && rows.iter().all(|r| r.accuracy.is_finite());
    let mut rng = seeded(77);
    let mut invariant = 0;
    let configs = ablation_configs(&model_config(1));
    let no_eq = &configs.iter().find(|(_, c)| !c.use_eq_stream).ok_or("no ground-motion ablation")?.1;
    let no_site = &configs.iter().find(|(_, c)| !c.use_site_stream).ok_or("no site-feature ablation")?.1;
    for k in 0..ABLATION_PERTURBATIONS {
        let m_eq = Model::<f64>::init(&ModelConfig { seed: k, ..no_eq.clone() }).map_err(fail)?;
        let m_site = Model::<f64>::init(&ModelConfig { seed: k, ..no_site.clone() }).map_err(fail)?;
        let x = random_input(m_eq.config(), &mut rng);
        let mut x_eq = x.clone();
        x_eq.spectrum.iter_mut().for_each(|v| *v = rng.random_range(0.0..5.0));
        let mut x_site = x.clone();
        x_site.site = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
        let same = |m: &Model, a: &ModelInput, b: &ModelInput| -> lqtf::Result<bool> {
            let (pa, pb) = (m.predict_one(a)?, m.predict_one(b)?);
            Ok(pa.p.iter().zip(&pb.p).all(|(u, v)| u.to_bits() == v.to_bits()))
        };
        if same(&m_eq, &x, &x_eq).map_err(fail)? && same(&m_site, &x, &x_site).map_err(fail)? {
            invariant += 1;
        }
    }
    let summary: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.name, r.accuracy)).collect();
    check(
        reported && invariant == ABLATION_PERTURBATIONS,
        format!(
            "{} configurations trained {ABLATION_EPOCHS} epochs [{}]; ablated streams bit-invariant in {invariant}/{ABLATION_PERTURBATIONS} perturbations",
            rows.len(),
            summary.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------- CPT

/// Log-space re-evaluation of the equivalence, sharing no code with the crate.
fn spt_oracle(qt: f64, ic: f64, pa: f64) -> f64 {
    let ln_a = 92.728f64.ln() - 2.746 * ic.ln();
    let b = 0.5333 * ic - 0.1185 * ic * ic - 0.0764;
    (((qt / pa).ln() - ln_a) / b).exp()
}

fn cpt_to_spt_check() -> Outcome {
    let pa = ATMOSPHERIC_PRESSURE_MPA;
    let (mut worst, mut monotone, mut unit) = (0.0f64, true, true);
    for ic in [IC_SAND, IC_SILTY_SAND, IC_CLAY] {
        let (a, _) = cpt_coefficients(ic);
        unit &= cpt_to_spt(CptSample { qt: pa * a, ic }, pa).map_err(fail)? == 1.0;
        let mut prev = 0.0;
        for i in 1..=400 {
            let qt = 0.05 * i as f64;
            let n = cpt_to_spt(CptSample { qt, ic }, pa).map_err(fail)?;
            monotone &= n > prev;
            prev = n;
            let o = spt_oracle(qt, ic, pa);
            worst = worst.max((n - o).abs() / o.abs().max(1.0));
        }
    }
    check(
        monotone && unit && worst <= CPT_TOL,
        format!("monotone in qt for Ic 1.7, 2.2, 2.95: {monotone}; N60 = 1 at qt = pa A: {unit}; max deviation from re-evaluation {worst:.1e} <= {CPT_TOL:e}"),
    )
}

// --------------------------------------------------------------- checkpoint

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/tiny.lqtf")
}

/// Walks the byte layout by hand: magic, little-endian manifest length,
/// JSON manifest, then contiguous little-endian doubles.
fn layout_matches(bytes: &[u8], m: &Model) -> Result<(), String> {
    if &bytes[..5] != b"LQTF1" {
        return Err("bad magic".into());
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().map_err(fail)?) as usize;
    let manifest: Value = serde_json::from_slice(&bytes[9..9 + len]).map_err(fail)?;
    let keys: Vec<&str> = manifest.as_object().ok_or("manifest is not an object")?.keys().map(String::as_str).collect();
    if keys != ["config", "format_version", "parameters"] || manifest["format_version"] != 1 {
        return Err(format!("manifest keys {keys:?}"));
    }
    let data = &bytes[9 + len..];
    let mut offset = 0;
    for ((_, name, p), entry) in m.params().iter().zip(manifest["parameters"].as_array().ok_or("no parameter list")?) {
        let shape: Vec<usize> = serde_json::from_value(entry["shape"].clone()).map_err(fail)?;
        if entry["name"] != name || shape != p.value.shape() || entry["offset"] != offset {
            return Err(format!("entry for `{name}` is {entry}"));
        }
        for (i, v) in p.value.data().iter().enumerate() {
            let at = offset + 8 * i;
            let stored = f64::from_le_bytes(data[at..at + 8].try_into().map_err(fail)?);
            if stored.to_bits() != v.to_bits() {
                return Err(format!("`{name}`[{i}] stored as {stored}, expected {v}"));
            }
        }
        offset += 8 * p.value.len();
    }
    if offset != data.len() {
        return Err(format!("data section is {} bytes, expected {offset}", data.len()));
    }
    Ok(())
}

fn checkpoint(trained: &Option<Trained>) -> Outcome {
    let t = needs(trained)?;
    let dir = tempfile::tempdir().map_err(fail)?;
    let path = dir.path().join("model.lqtf");
    save_checkpoint(&t.model, &path).map_err(fail)?;
    let back: Model = load_checkpoint(&path).map_err(fail)?;
    let before = evaluate(&t.model, &t.ds, &t.split.val).map_err(fail)?;
    let after = evaluate(&back, &t.ds, &t.split.val).map_err(fail)?;
    let recall_gap = match (before.recall, after.recall) {
        (Some(a), Some(b)) => (a - b).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    let metric_gap = (before.loss - after.loss).abs().max((before.accuracy - after.accuracy).abs()).max(recall_gap);
    let same_confusion = before.confusion == after.confusion;

    let tiny = Model::<f64>::init(&tiny_model_config(3)).map_err(fail)?;
    let bytes = checkpoint_bytes(&tiny).map_err(fail)?;
    if std::env::var_os("LQTF_BLESS").is_some() {
        std::fs::create_dir_all(golden_path().parent().expect("has a parent")).map_err(fail)?;
        std::fs::write(golden_path(), &bytes).map_err(fail)?;
    }
    let golden = std::fs::read(golden_path()).map_err(|e| format!("{}: {e}", golden_path().display()))?;
    let layout = layout_matches(&golden, &tiny);
    check(
        metric_gap <= ROUND_TRIP_TOL && same_confusion && golden == bytes && layout.is_ok(),
        format!(
            "reloaded metrics differ by {metric_gap:.1e} <= {ROUND_TRIP_TOL:e}; golden file {} bytes, identical: {}; layout: {}",
            golden.len(),
            golden == bytes,
            layout.err().unwrap_or_else(|| "ok".into())
        ),
    )
}

// ------------------------------------------------------------------ service

async fn post(app: &Router, uri: &str, body: &Value) -> (StatusCode, Value) {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .expect("valid request");
    let resp = app.clone().oneshot(req).await.expect("infallible service");
    let status = resp.status();
    let bytes = resp.into_body().collect().await.map(|b| b.to_bytes()).unwrap_or_default();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

/// The body parses as `T` and re-serializes to itself.
fn conforms<T: DeserializeOwned + Serialize>(what: &str, v: &Value) -> Result<T, String> {
    let typed: T = serde_json::from_value(v.clone()).map_err(|e| format!("{what}: {e}: {v}"))?;
    if serde_json::to_value(&typed).map_err(fail)? != *v {
        return Err(format!("{what}: body does not round-trip: {v}"));
    }
    Ok(typed)
}

async fn service_checks(app: Router, sites: Vec<Value>) -> Outcome {
    let s0 = json!({ "site": sites[0] });
    let (st, body) = post(&app, "/predict", &s0).await;
    if st != StatusCode::OK {
        return Err(format!("/predict returned {st}: {body}"));
    }
    let p: PredictResponse = conforms("/predict", &body)?;

    let (st, body) = post(&app, "/explain", &json!({ "site": sites[0], "options": { "n_perms": 500, "seed": 1 } })).await;
    if st != StatusCode::OK {
        return Err(format!("/explain returned {st}: {body}"));
    }
    let a: Attribution = conforms("/explain", &body)?;
    let additive = a.groups.len() == N_GROUPS && a.additivity_residual() <= SHAPLEY_EXACT_TOL && a.fx.to_bits() == p.p_liq.to_bits();

    let (st, body) = post(&app, "/sensitivity", &json!({ "site": sites[0], "factors": { "pga": [1.0], "spt": [1.0] } })).await;
    if st != StatusCode::OK {
        return Err(format!("/sensitivity returned {st}: {body}"));
    }
    let g: SensitivityGrid = conforms("/sensitivity", &body)?;
    let identity = g.p[0][0].to_bits() == p.p_liq.to_bits();

    let batch: Vec<Value> = (0..BATCH_SITES).map(|i| json!({ "site": sites[i % sites.len()] })).collect();
    let start = Instant::now();
    let (st, body) = post(&app, "/batch", &Value::Array(batch)).await;
    let batch_time = start.elapsed();
    if st != StatusCode::OK {
        return Err(format!("/batch returned {st}"));
    }
    let rows: Vec<PredictResponse> = conforms("/batch", &body)?;
    let batch_ok = rows.len() == BATCH_SITES && rows[0] == p;

    let (st, body) = post(&app, "/predict", &json!({ "site": { "vs30": 200.0 } })).await;
    let error_ok = st == StatusCode::BAD_REQUEST && conforms::<ErrorBody>("error", &body).is_ok();
    check(
        additive && identity && batch_ok && error_ok && batch_time <= BATCH_BUDGET,
        format!(
            "schemas round-trip; explain additive: {additive}; identity grid equals /predict: {identity}; \
             {BATCH_SITES}-site batch in {:.2} s <= {:.0} s (consistent: {batch_ok}); malformed body gives a 400 error object: {error_ok}",
            batch_time.as_secs_f64(),
            BATCH_BUDGET.as_secs_f64()
        ),
    )
}

fn service(trained: &Option<Trained>) -> Outcome {
    let t = needs(trained)?;
    let (train_x, _) = inputs_for::<f64>(&t.ds, &t.split.train).map_err(fail)?;
    let st = t.ds.standardizer.clone().ok_or("dataset is not standardized")?;
    let bundle = ModelBundle::new(t.model.clone(), st, background_subset(&train_x)).map_err(fail)?;
    let motions = MotionLibrary { records: t.corpus.motions.iter().map(|m| (m.id.clone(), m.clone())).collect() };
    let sites: Vec<Value> = t.corpus.sites.iter().map(|s| serde_json::to_value(SiteRow::from_record(s)).expect("serializable")).collect();
    let app = router(Some(ServiceState { bundle, motions }));
    let rt = tokio::runtime::Runtime::new().map_err(fail)?;
    rt.block_on(service_checks(app, sites))
}

fn main() {
    let mut report = Report { failures: 0 };
    let mut trained = None;
    report.run("gradient correctness", Some(GRAD_BUDGET), gradient_correctness);
    report.run("FFT oracle", Some(FFT_BUDGET), fft_oracle);
    report.run("Shapley axioms", Some(SHAPLEY_BUDGET), shapley_axioms);
    report.run("shape contract", Some(SHAPE_BUDGET), shape_contract);
    report.run("pipeline reproduction", None, || pipeline(&mut trained));
    report.run("zero-motion sensitivity", None, || zero_motion(&trained));
    report.run("ablation harness", None, || ablation(&trained));
    report.run("CPT to SPT", None, cpt_to_spt_check);
    report.run("checkpoint round trip", None, || checkpoint(&trained));
    report.run("service contract", None, || service(&trained));
    println!("{} of 10 criteria failed", report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
