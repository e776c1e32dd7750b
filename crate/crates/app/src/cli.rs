//! `lqtf` subcommands. Files go to `--out`, a short summary to stdout.
//! Exit status: 0 on success, 1 for invalid input or usage, 2 for internal failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lqtf::data::synthetic::{SyntheticConfig, SyntheticCorpus};
use lqtf::data::{augment_null_motion, null_twin, parse_sites_csv, sites_to_csv, stratified_split, Dataset, SiteRecord, Split};
use lqtf::explain::{beeswarm_csv, global_importance, waterfall_export, DEFAULT_N_PERMS};
use lqtf::model::{count_params, ModelConfig, ModelInput};
use lqtf::signal::SpectralConfig;
use lqtf::train::{
    ablation_csv, ablation_study, cross_validate, epoch_log_csv, inputs_for, train, Metrics, TrainConfig,
};
use lqtf::Error;
use serde::Serialize;

use crate::api::default_pga_factors;
use crate::bundle::{background_subset, ModelBundle, MotionLibrary};
use crate::service::{serve, ServiceState};

#[derive(Debug, Parser)]
#[command(name = "lqtf", version, about = "Liquefaction prediction with a multi-modal transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Sites CSV.
    #[arg(long)]
    data: PathBuf,
    /// Directory of `<motion_id>.csv` files.
    #[arg(long)]
    motions: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    soil_heads: usize,
    #[arg(long, default_value_t = 2)]
    soil_loops: usize,
    #[arg(long, default_value_t = 2)]
    eq_heads: usize,
    #[arg(long)]
    no_eq_stream: bool,
    #[arg(long)]
    no_site_stream: bool,
    /// Spectral bins fed to the earthquake encoder.
    #[arg(long, default_value_t = lqtf::signal::DEFAULT_SPECTRUM_LEN)]
    spec_len: usize,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            soil_heads: self.soil_heads,
            soil_loops: self.soil_loops,
            eq_heads: self.eq_heads,
            use_eq_stream: !self.no_eq_stream,
            use_site_stream: !self.no_site_stream,
            spectral: SpectralConfig { len: self.spec_len, ..SpectralConfig::default() },
            seed,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    /// Defaults to 500, or 50 for `ablate`.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 20)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    weight_decay: f64,
}

impl TrainArgs {
    fn config(&self, seed: u64, default_epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.unwrap_or(default_epochs),
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus (sites.csv and motions/).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 165)]
        n_sites: usize,
    },
    /// Parse, augment with null motions, split and fit the standardizer.
    Prepare {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        val_frac: f64,
        #[arg(long, default_value_t = lqtf::signal::DEFAULT_SPECTRUM_LEN)]
        spec_len: usize,
    },
    /// Train on the prepared split and write a model bundle.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        val_frac: f64,
    },
    /// k-fold cross-validation on the augmented corpus.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        folds: usize,
    },
    /// Score a sites file with a trained bundle.
    Eval {
        /// Model bundle directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also score a null-motion twin of every site.
        #[arg(long)]
        augment: bool,
    },
    /// Train every ablation variant on the same split.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        val_frac: f64,
    },
    /// Grouped Shapley attributions for sites of a sites file.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_N_PERMS)]
        n_perms: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to these site ids (repeatable); all sites by default.
        #[arg(long)]
        site: Vec<String>,
    },
    /// p_liq over a PGA by SPT factor grid for one site.
    Sensitivity {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        site: String,
        /// Comma-separated PGA factors in [0, 1]; 0, 0.1, ..., 1 by default.
        #[arg(long, value_delimiter = ',')]
        pga: Vec<f64>,
        /// Comma-separated SPT factors; 1 by default.
        #[arg(long, value_delimiter = ',')]
        spt: Vec<f64>,
    },
    /// Serve a model bundle over HTTP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        motions: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Print the parameter count of a configuration.
    Params {
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Internal(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Shape(_) | Error::State(_) => Self::Internal(e.to_string()),
            _ => Self::Invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Invalid(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(CliError::Invalid(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            2
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn out_dir(out: &Path) -> CliResult<&Path> {
    std::fs::create_dir_all(out)?;
    Ok(out)
}

/// Loads, augments, splits and standardizes; the standardizer sees only the training partition.
pub fn prepare_dataset(data: &Path, motions: &Path, spectral: SpectralConfig, val_frac: f64, seed: u64) -> lqtf::Result<(Dataset, Split)> {
    let raw = Dataset::load(data, motions, spectral)?;
    let ds = augment_null_motion(&raw)?;
    let split = stratified_split(&ds.labels(), val_frac, seed)?;
    let ds = ds.fit_standardizer(&split.train)?;
    Ok((ds, split))
}

#[derive(Serialize)]
struct SplitIds<'a> {
    train: Vec<&'a str>,
    val: Vec<&'a str>,
}

fn split_ids<'a>(ds: &'a Dataset, split: &Split) -> SplitIds<'a> {
    let ids = |idx: &[usize]| idx.iter().map(|&i| ds.sites[i].site_id.as_str()).collect();
    SplitIds { train: ids(&split.train), val: ids(&split.val) }
}

#[derive(Serialize)]
struct TrainReport<'a> {
    model_version: &'a str,
    seed: u64,
    params: usize,
    best_epoch: usize,
    metrics: &'a Metrics,
    composition: lqtf::train::Composition,
    model_config: &'a ModelConfig,
    train_config: &'a TrainConfig,
}

fn execute(command: Command) -> CliResult {
    match command {
        Command::Synth { out, seed, n_sites } => {
            let corpus = SyntheticCorpus::generate(&SyntheticConfig { n_sites, seed, ..SyntheticConfig::default() })?;
            corpus.write_to(out_dir(&out)?)?;
            let pos = corpus.sites.iter().filter(|s| u8::from(s.label) == 1).count();
            println!("wrote {} sites ({pos} liquefied) and {} motions to {}", corpus.sites.len(), corpus.motions.len(), out.display());
        }
        Command::Prepare { data, out, seed, val_frac, spec_len } => {
            let spectral = SpectralConfig { len: spec_len, ..SpectralConfig::default() };
            let (ds, split) = prepare_dataset(&data.data, &data.motions, spectral, val_frac, seed)?;
            let out = out_dir(&out)?;
            std::fs::write(out.join("prepared.csv"), sites_to_csv(&ds.sites)?)?;
            write_json(&out.join("split.json"), &split_ids(&ds, &split))?;
            write_json(&out.join("standardizer.json"), ds.standardizer.as_ref().expect("fitted above"))?;
            let pos = ds.labels().iter().filter(|&&l| l == 1).count();
            println!(
                "{} records ({} liquefied), train {}, validation {}",
                ds.len(),
                pos,
                split.train.len(),
                split.val.len()
            );
        }
        Command::Train { data, model, train: targs, out, seed, val_frac } => {
            let mcfg = model.config(seed);
            let tcfg = targs.config(seed, 500);
            let (ds, split) = prepare_dataset(&data.data, &data.motions, mcfg.spectral, val_frac, seed)?;
            let out = out_dir(&out)?;
            let outcome = train::<f64>(&ds, &split, &mcfg, &tcfg, None)?;
            let (train_x, _) = inputs_for::<f64>(&ds, &split.train)?;
            let bundle = ModelBundle::new(outcome.best, ds.standardizer.clone().expect("fitted"), background_subset(&train_x))?;
            bundle.save(out)?;
            std::fs::write(out.join("epoch_log.csv"), epoch_log_csv(&outcome.log)?)?;
            write_json(&out.join("split.json"), &split_ids(&ds, &split))?;
            write_json(
                &out.join("train_report.json"),
                &TrainReport {
                    model_version: &bundle.version,
                    seed,
                    params: count_params(&mcfg),
                    best_epoch: outcome.best_epoch,
                    metrics: &outcome.best_metrics,
                    composition: outcome.composition,
                    model_config: &mcfg,
                    train_config: &tcfg,
                },
            )?;
            let m = &outcome.best_metrics;
            println!(
                "best epoch {} of {}: validation accuracy {:.4}, recall {}, loss {:.4} ({})",
                outcome.best_epoch,
                tcfg.epochs,
                m.accuracy,
                m.recall.map_or("n/a".to_string(), |r| format!("{r:.4}")),
                m.loss,
                bundle.version
            );
        }
        Command::Cv { data, model, train: targs, out, seed, folds } => {
            let mcfg = model.config(seed);
            let tcfg = targs.config(seed, 500);
            let raw = Dataset::load(&data.data, &data.motions, mcfg.spectral)?;
            let ds = augment_null_motion(&raw)?;
            let report = cross_validate(&ds, &mcfg, &tcfg, folds)?;
            write_json(&out_dir(&out)?.join("cv_report.json"), &report)?;
            for (i, m) in report.folds.iter().enumerate() {
                println!("fold {i}: accuracy {:.4}", m.accuracy);
            }
            println!("mean accuracy {:.4} (std {:.4})", report.mean_accuracy, report.std_accuracy);
        }
        Command::Eval { model, data, out, augment } => {
            let bundle = ModelBundle::load(&model)?;
            let lib = MotionLibrary::load_dir(&data.motions)?;
            let mut sites = parse_sites_csv(&std::fs::read_to_string(&data.data)?)?;
            if augment {
                let twins: Vec<SiteRecord> = sites.iter().map(null_twin).collect();
                sites.extend(twins);
            }
            let inputs = site_inputs(&bundle, &lib, &sites)?;
            let preds = bundle.predict(&inputs)?;
            let out = out_dir(&out)?;
            let mut text = String::from("site_id,label,p_liq,p_noliq\n");
            for (s, p) in sites.iter().zip(&preds) {
                text.push_str(&format!("{},{},{},{}\n", s.site_id, u8::from(s.label), p.p_liq, p.p_noliq));
            }
            std::fs::write(out.join("predictions.csv"), text)?;
            let y: Vec<f64> = sites.iter().map(|s| f64::from(u8::from(s.label))).collect();
            let p: Vec<f64> = preds.iter().map(|p| p.p_liq).collect();
            let metrics = Metrics::from_predictions(&y, &p)?;
            write_json(&out.join("metrics.json"), &metrics)?;
            println!(
                "{} sites: accuracy {:.4}, recall {}, loss {:.4}",
                sites.len(),
                metrics.accuracy,
                metrics.recall.map_or("n/a".to_string(), |r| format!("{r:.4}")),
                metrics.loss
            );
        }
        Command::Ablate { data, model, train: targs, out, seed, val_frac } => {
            let mcfg = model.config(seed);
            let tcfg = targs.config(seed, 50);
            let (ds, split) = prepare_dataset(&data.data, &data.motions, mcfg.spectral, val_frac, seed)?;
            let rows = ablation_study(&ds, &split, &mcfg, &tcfg)?;
            let out = out_dir(&out)?;
            std::fs::write(out.join("ablation.csv"), ablation_csv(&rows)?)?;
            write_json(&out.join("ablation.json"), &rows)?;
            for r in &rows {
                println!("{:<28} params {:>7}  accuracy {:.4}", r.name, r.params, r.accuracy);
            }
        }
        Command::Explain { model, data, out, n_perms, seed, site } => {
            let bundle = ModelBundle::load(&model)?;
            let lib = MotionLibrary::load_dir(&data.motions)?;
            let sites = select_sites(parse_sites_csv(&std::fs::read_to_string(&data.data)?)?, &site)?;
            let inputs = site_inputs(&bundle, &lib, &sites)?;
            let mut rows = Vec::with_capacity(sites.len());
            for (s, x) in sites.iter().zip(inputs) {
                let attr = bundle.explain(&x, n_perms, seed)?;
                rows.push((s.site_id.clone(), x, attr));
            }
            let out = out_dir(&out)?;
            let attrs: Vec<_> = rows.iter().map(|(_, _, a)| a.clone()).collect();
            let importance = global_importance(&attrs)?;
            #[derive(Serialize)]
            struct SiteAttribution<'a> {
                site_id: &'a str,
                attribution: &'a lqtf::explain::Attribution,
                waterfall: lqtf::explain::Waterfall,
            }
            let per_site: Vec<_> = rows
                .iter()
                .map(|(id, _, a)| SiteAttribution { site_id: id, attribution: a, waterfall: waterfall_export(a) })
                .collect();
            write_json(&out.join("attributions.json"), &per_site)?;
            write_json(&out.join("importance.json"), &importance)?;
            std::fs::write(out.join("beeswarm.csv"), beeswarm_csv(&rows)?)?;
            println!("explained {} sites with {n_perms} permutations; top groups:", rows.len());
            for (name, v) in importance.iter().take(5) {
                println!("  {name:<10} {v:.4}");
            }
        }
        Command::Sensitivity { model, data, out, site, pga, spt } => {
            let bundle = ModelBundle::load(&model)?;
            let lib = MotionLibrary::load_dir(&data.motions)?;
            let sites = select_sites(parse_sites_csv(&std::fs::read_to_string(&data.data)?)?, std::slice::from_ref(&site))?;
            let s = &sites[0];
            let motion = match lib.resolve(&s.motion_id)? {
                lqtf::signal::MotionInput::Record(r) => r,
                lqtf::signal::MotionInput::Null => {
                    return Err(CliError::Invalid("sensitivity needs a recorded motion".into()))
                }
            };
            let pga = if pga.is_empty() { default_pga_factors() } else { pga };
            let spt = if spt.is_empty() { vec![1.0] } else { spt };
            let grid = bundle.sensitivity(s, motion, &pga, &spt)?;
            write_json(&out_dir(&out)?.join("sensitivity.json"), &grid)?;
            for (a, row) in grid.pga_factors.iter().zip(&grid.p) {
                let cells: Vec<String> = row.iter().map(|p| format!("{p:.4}")).collect();
                println!("pga x{a:<5} {}", cells.join(" "));
            }
        }
        Command::Serve { model, motions, bind } => {
            let state = ServiceState { bundle: ModelBundle::load(&model)?, motions: MotionLibrary::load_dir(&motions)? };
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
            println!("serving {} on http://{bind}", state.bundle.version);
            rt.block_on(serve(state, &bind))?;
        }
        Command::Params { model } => {
            let cfg = model.config(0);
            cfg.validate()?;
            println!("{}", count_params(&cfg));
        }
    }
    Ok(())
}

fn select_sites(sites: Vec<SiteRecord>, ids: &[String]) -> CliResult<Vec<SiteRecord>> {
    if ids.is_empty() {
        return Ok(sites);
    }
    ids.iter()
        .map(|id| {
            sites
                .iter()
                .find(|s| &s.site_id == id)
                .cloned()
                .ok_or_else(|| CliError::Invalid(format!("site `{id}` not found")))
        })
        .collect()
}

fn site_inputs(bundle: &ModelBundle, lib: &MotionLibrary, sites: &[SiteRecord]) -> CliResult<Vec<ModelInput>> {
    sites
        .iter()
        .map(|s| Ok(bundle.input(s, lib.resolve(&s.motion_id)?)?))
        .collect()
}
