//! BCE loss, Adam with decoupled weight decay, metrics, the training loop and k-fold CV.

mod metrics;
mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use metrics::{bce_loss, Confusion, FoldReport, Metrics};
pub use optim::{adam_step, AdamState};

use crate::data::{fold_train_indices, kfold_indices, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{ablation_configs, count_params, save_checkpoint, Batch, Model, ModelConfig, ModelInput};
use crate::nn::{Mode, Tape};
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 500, batch_size: 20, lr: 1e-4, weight_decay: 1e-3, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_recall: Option<f64>,
    pub checkpointed: bool,
}

/// Label counts of each partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub train_pos: usize,
    pub train_neg: usize,
    pub val_pos: usize,
    pub val_neg: usize,
    /// Null-motion twins in the validation partition.
    pub val_null: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar = f64> {
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_metrics: Metrics,
    pub log: Vec<EpochLog>,
    pub composition: Composition,
}

/// Model inputs and 0/1 targets for a subset of the dataset.
pub fn inputs_for<T: Scalar>(ds: &Dataset, idx: &[usize]) -> Result<(Vec<ModelInput<T>>, Vec<T>)> {
    let mut xs = Vec::with_capacity(idx.len());
    let mut ys = Vec::with_capacity(idx.len());
    for &i in idx {
        let site = ds.sites.get(i).ok_or_else(|| Error::InvalidInput(format!("record index {i} out of range")))?;
        xs.push(ModelInput::new(ds.spectrum(site)?, &ds.features(site)?));
        ys.push(T::of(f64::from(u8::from(site.label))));
    }
    Ok((xs, ys))
}

pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &Dataset, idx: &[usize]) -> Result<Metrics> {
    if idx.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty partition".into()));
    }
    let (xs, ys) = inputs_for::<T>(ds, idx)?;
    evaluate_inputs(model, &xs, &ys)
}

fn evaluate_inputs<T: Scalar>(model: &Model<T>, xs: &[ModelInput<T>], ys: &[T]) -> Result<Metrics> {
    let preds = model.predict(xs)?;
    let p: Vec<f64> = preds.iter().map(|p| p.p_liq().as_f64()).collect();
    let y: Vec<f64> = ys.iter().map(|v| v.as_f64()).collect();
    Metrics::from_predictions(&y, &p)
}

fn composition(ds: &Dataset, split: &Split) -> Composition {
    let pos = |idx: &[usize]| idx.iter().filter(|&&i| u8::from(ds.sites[i].label) == 1).count();
    let (tp, vp) = (pos(&split.train), pos(&split.val));
    Composition {
        train_pos: tp,
        train_neg: split.train.len() - tp,
        val_pos: vp,
        val_neg: split.val.len() - vp,
        val_null: split.val.iter().filter(|&&i| ds.sites[i].null_twin).count(),
    }
}

/// Mini-batch Adam training with best-validation-accuracy retention.
///
/// The model is initialized from `model_cfg.seed`; shuffling and dropout
/// draw from one stream seeded by `train_cfg.seed`. When `checkpoint` is
/// given the file is rewritten at every improvement.
pub fn train<T: Scalar>(
    ds: &Dataset,
    split: &Split,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    train_cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::InvalidInput("empty training partition".into()));
    }
    if split.val.is_empty() {
        return Err(Error::InvalidInput("empty validation partition".into()));
    }
    if ds.spectral != model_cfg.spectral {
        return Err(Error::Config("dataset spectra were encoded with a different spectral configuration".into()));
    }
    let (train_x, train_y) = inputs_for::<T>(ds, &split.train)?;
    let (val_x, val_y) = inputs_for::<T>(ds, &split.val)?;
    let mut model = Model::<T>::init(model_cfg)?;
    let mut adam = AdamState::new(model.params());
    let mut rng = seeded(train_cfg.seed);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(Model<T>, usize, Metrics)> = None;

    for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch = Batch::new(chunk.iter().map(|&i| &train_x[i]));
            let targets: Vec<T> = chunk.iter().map(|&i| train_y[i]).collect();
            let grads = {
                let mut tape = Tape::new(model.params());
                let vars = model.forward(&mut tape, &batch, Mode::Train, &mut rng)?;
                let loss = tape.bce(vars.probs, &targets)?;
                loss_sum += tape.value(loss).data()[0].as_f64() * chunk.len() as f64;
                tape.backward(loss)?
            };
            model.params_mut().zero_grad();
            grads.accumulate_into(model.params_mut());
            adam_step(model.params_mut(), &mut adam, train_cfg)?;
        }
        let val = evaluate_inputs(&model, &val_x, &val_y)?;
        let improved = best.as_ref().is_none_or(|(_, _, m)| val.accuracy > m.accuracy);
        if improved {
            if let Some(path) = checkpoint {
                save_checkpoint(&model, path)?;
            }
        }
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_x.len() as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            val_recall: val.recall,
            checkpointed: improved,
        });
        if improved {
            best = Some((model.clone(), epoch, val));
        }
    }
    let (best, best_epoch, best_metrics) = best.expect("at least one epoch");
    Ok(TrainOutcome { best, best_epoch, best_metrics, log, composition: composition(ds, split) })
}

/// k-fold CV on an augmented, unstandardized dataset. Fold `f` refits the
/// standardizer on its training folds and seeds init and training with `seed ^ f`.
pub fn cross_validate(ds: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig, k: usize) -> Result<FoldReport> {
    let folds = kfold_indices(ds.len(), k, train_cfg.seed)?;
    let mut metrics = Vec::with_capacity(k);
    for f in 0..k {
        metrics.push(run_fold(ds, &folds, f, model_cfg, train_cfg)?);
    }
    FoldReport::new(metrics)
}

/// Trains and scores one fold; folds are independent of each other.
pub fn run_fold(
    ds: &Dataset,
    folds: &[Vec<usize>],
    f: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Metrics> {
    let seed = derive_seed(train_cfg.seed, f as u64);
    let split = Split { train: fold_train_indices(folds, f), val: folds[f].clone() };
    let fitted = ds.fit_standardizer(&split.train)?;
    let mcfg = ModelConfig { seed, ..model_cfg.clone() };
    let tcfg = TrainConfig { seed, ..train_cfg.clone() };
    let out = train::<f64>(&fitted, &split, &mcfg, &tcfg, None)?;
    Ok(out.best_metrics)
}

/// One row of the ablation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub soil_heads: usize,
    pub soil_loops: usize,
    pub eq_heads: usize,
    pub use_eq_stream: bool,
    pub use_site_stream: bool,
    pub params: usize,
    pub best_epoch: usize,
    pub accuracy: f64,
    pub recall: Option<f64>,
}

/// Trains every ablation variant of `base` on the same split.
pub fn ablation_study(ds: &Dataset, split: &Split, base: &ModelConfig, train_cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    ablation_configs(base)
        .into_iter()
        .map(|(name, cfg)| {
            let out = train::<f64>(ds, split, &cfg, train_cfg, None)?;
            Ok(AblationRow {
                name: name.to_string(),
                soil_heads: cfg.soil_heads,
                soil_loops: cfg.soil_loops,
                eq_heads: cfg.eq_heads,
                use_eq_stream: cfg.use_eq_stream,
                use_site_stream: cfg.use_site_stream,
                params: count_params(&cfg),
                best_epoch: out.best_epoch,
                accuracy: out.best_metrics.accuracy,
                recall: out.best_metrics.recall,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn epoch_log_csv(log: &[EpochLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss", "val_accuracy", "val_recall", "checkpointed"])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_loss.to_string(),
            e.val_accuracy.to_string(),
            e.val_recall.map(|r| r.to_string()).unwrap_or_default(),
            u8::from(e.checkpointed).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
}
