//! `magat` command-line front end.
//!
//! Configuration files are `key = value` lines with `#` comments. Values are
//! layered: built-in defaults, then `MAGAT_SEED`, then the file, then flags.

pub mod selfcheck;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::evalharness::{
    ablation_matrix, comparison_table, export_features, metrics, prepare, train_seed, Adjacency, Axis, BandChoice,
    Dataset, EvalError, ExperimentConfig, ExperimentReport, PreparedData, PretrainSource, SeedOutcome, THRESHOLD,
};
use crate::extractor::{colorize_pretrain, BandSet, NormKind, PretrainConfig};
use crate::gnn::{ensemble_predict, Arch, AttnNorm, GraphModel};
use crate::ingest::{synth_scene, SplitTag, SynthConfig};

pub const SEED_ENV: &str = "MAGAT_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or values; exit code 1.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

impl From<crate::gnn::GnnError> for CliError {
    fn from(e: crate::gnn::GnnError) -> Self {
        CliError::Eval(e.into())
    }
}

impl From<crate::extractor::ExtractError> for CliError {
    fn from(e: crate::extractor::ExtractError) -> Self {
        CliError::Eval(e.into())
    }
}

impl From<crate::ingest::IngestError> for CliError {
    fn from(e: crate::ingest::IngestError) -> Self {
        CliError::Eval(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Effective run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            experiment: ExperimentConfig::default(),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment. Later keys win.
pub fn parse_config_text(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(usage(format!("config line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse().map_err(|_| usage(format!("{key}: cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<Vec<T>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn boolean(key: &str, v: &str) -> CliResult<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(usage(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parsed<T>(key: &str, v: &str, f: impl Fn(&str) -> Option<T>) -> CliResult<T> {
    f(v).ok_or_else(|| usage(format!("{key}: unknown value `{v}`")))
}

impl RunConfig {
    /// Base seed `s` gives the seeds `s..s+5`.
    pub fn with_base_seed(mut self, base: u64) -> Self {
        self.experiment.seeds = (base..base + 5).collect();
        self
    }

    pub fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        let e = &mut self.experiment;
        match key {
            "data" => self.data = Some(PathBuf::from(v)),
            "arch" => e.gnn.arch = parsed(key, v, Arch::parse)?,
            "adjacency" => e.split.adjacency = parsed(key, v, Adjacency::parse)?,
            "norm" => e.encoder.norm = parsed(key, v, NormKind::parse)?,
            "bands" => e.bands = parsed(key, v, BandChoice::parse)?,
            "pretrain" => e.pretrain = parsed(key, v, PretrainSource::parse)?,
            "layers" => e.gnn.layers = num(key, v)?,
            "f_int" => e.gnn.f_int = num(key, v)?,
            "attention_norm" => e.gnn.mode = parsed(key, v, AttnNorm::parse)?,
            "residual" => e.gnn.residual = boolean(key, v)?,
            "dropout" => e.gnn.dropout = num(key, v)?,
            "blocks" => e.encoder.blocks = num(key, v)?,
            "base_width" => e.encoder.base_width = num(key, v)?,
            "feature_dim" => e.encoder.feature_dim = num(key, v)?,
            "stem_stride" => e.encoder.stem_stride = num(key, v)?,
            "k" => e.split.k = num(key, v)?,
            "sigma" => e.split.sigma = num(key, v)?,
            "train_years" => e.split.train_years = list(key, v)?,
            "test_years" => e.split.test_years = list(key, v)?,
            "max_gap_days" => e.split.max_gap_days = num(key, v)?,
            "nodata_threshold" => e.split.nodata_threshold = num(key, v)?,
            "sinkhorn_max_iter" => e.split.sinkhorn_max_iter = num(key, v)?,
            "lr" => e.lr = num(key, v)?,
            "epochs" => e.epochs = num(key, v)?,
            "batch_size" => e.batch_size = num(key, v)?,
            "pretrain_epochs" => e.pretrain_epochs = num(key, v)?,
            "seeds" => e.seeds = list(key, v)?,
            // report-only keys echoed back by `describe`
            "threshold" | "optimizer" => {}
            _ => return Err(usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Checks referenced paths and value ranges.
    pub fn validate(&self) -> CliResult<()> {
        if let Some(d) = &self.data {
            if !d.join(crate::evalharness::dataset::MANIFEST_FILE).is_file() {
                return Err(usage(format!("data directory {} has no manifest", d.display())));
            }
        }
        if let PretrainSource::Checkpoint(p) = &self.experiment.pretrain {
            if !p.is_file() {
                return Err(usage(format!("encoder checkpoint {} not found", p.display())));
            }
        }
        self.experiment.validate().map_err(|e| usage(e.to_string()))
    }

    pub fn describe(&self) -> BTreeMap<String, String> {
        let mut d = self.experiment.describe();
        if let Some(p) = &self.data {
            d.insert("data".into(), p.display().to_string());
        }
        d
    }

    pub fn data_dir(&self) -> CliResult<&Path> {
        self.data.as_deref().ok_or_else(|| usage("no dataset: set `data` in the config or pass --data"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "magat", about = "Multi-adjacency graph attention pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenSynth(SynthArgs),
    /// Colorization pretraining of the encoder on training patches.
    Pretrain(RunArgs),
    /// Train one model per seed; write checkpoints and a report.
    Train(RunArgs),
    /// Evaluate saved checkpoints (two checkpoints are ensembled).
    Eval(EvalArgs),
    /// Run the Cartesian product of ablation axes.
    Ablate(AblateArgs),
    /// Write final-layer pivot features to CSV.
    ExportFeatures(ExportArgs),
    /// Fast invariant checks.
    Selfcheck,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 2264)]
    sites: usize,
    #[arg(long, default_value_t = 0.347)]
    positive_rate: f64,
    #[arg(long, default_value_t = 3.0)]
    signal: f64,
    #[arg(long, default_value_t = 32)]
    patch_side: usize,
    #[arg(long)]
    site_noise: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    years: Option<Vec<i32>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    adjacency: Option<String>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    bands: Option<String>,
    #[arg(long)]
    pretrain: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Model checkpoint; pass twice to average an RGB and a spectral model.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated axes; `name=v1|v2` restricts an axis to some values.
    #[arg(long, default_value = "adjacency")]
    axes: String,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(num(SEED_ENV, v.trim())?)),
        Err(_) => Ok(None),
    }
}

fn load_run_config(a: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(s) = env_seed()? {
        cfg = cfg.with_base_seed(s);
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        for (k, v) in parse_config_text(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    let flags = [
        ("arch", &a.arch),
        ("adjacency", &a.adjacency),
        ("norm", &a.norm),
        ("bands", &a.bands),
        ("pretrain", &a.pretrain),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(e) = a.epochs {
        cfg.experiment.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.experiment.lr = lr;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        cfg.experiment.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(usage("--jobs must be positive"));
        }
        b = b.num_threads(j);
    }
    let pool = b.build().map_err(|e| usage(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn write_file(out: &Path, name: &str, text: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(out)?;
    let p = out.join(name);
    fs::write(&p, text)?;
    Ok(p)
}

fn config_text(d: &BTreeMap<String, String>) -> String {
    d.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn load_prepared(cfg: &RunConfig) -> CliResult<PreparedData> {
    let dir = cfg.data_dir()?;
    log::info!("loading dataset from {}", dir.display());
    let ds = Dataset::load(dir)?;
    let data = prepare(&ds, &cfg.experiment.split)?;
    log::info!(
        "{} train / {} test graphs ({} rejected, {} unpaired)",
        data.train.len(),
        data.test.len(),
        data.rejected,
        data.unpaired
    );
    Ok(data)
}

fn gen_synth(a: &SynthArgs) -> CliResult<()> {
    let mut cfg = SynthConfig {
        n_sites: a.sites,
        positive_rate: a.positive_rate,
        signal_strength: a.signal,
        patch_side: a.patch_side,
        ..SynthConfig::default()
    };
    if let Some(s) = a.seed.or(env_seed()?) {
        cfg.seed = s;
    }
    if let Some(n) = a.site_noise {
        cfg.site_noise = n;
    }
    if let Some(y) = &a.years {
        cfg.years = y.clone();
    }
    log::info!("generating {} sites (seed {})", cfg.n_sites, cfg.seed);
    let scene = synth_scene(&cfg)?;
    let ds = Dataset::from_scene(scene, cfg.seed);
    let manifest = ds.write(&a.out, &crate::evalharness::SplitConfig::default())?;
    let echo = format!(
        "seed = {}\nsites = {}\npositive_rate = {}\nsignal = {}\npatch_side = {}\nsite_noise = {}\nyears = {}\n",
        cfg.seed,
        cfg.n_sites,
        cfg.positive_rate,
        cfg.signal_strength,
        cfg.patch_side,
        cfg.site_noise,
        cfg.years.iter().map(i32::to_string).collect::<Vec<_>>().join(",")
    );
    write_file(&a.out, "synth.cfg", &echo)?;
    println!(
        "wrote {} patches, {} positive / {} negative sites to {}",
        manifest.entries.len(),
        manifest.positives,
        manifest.negatives,
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: &RunArgs) -> CliResult<()> {
    let cfg = load_run_config(a)?;
    let data = load_prepared(&cfg)?;
    let e = &cfg.experiment;
    let corpus: Vec<_> = data
        .pool
        .iter()
        .zip(&data.pool_split)
        .filter(|(_, &t)| t == SplitTag::Train)
        .map(|(p, _)| p.clone())
        .collect();
    let enc = crate::extractor::ExtractorConfig {
        bands: BandSet::Spectral,
        ..e.encoder.clone()
    };
    let pcfg = PretrainConfig {
        epochs: e.pretrain_epochs,
        lr: e.lr,
        batch_size: e.batch_size,
        seed: e.seeds[0],
    };
    let outcome = with_jobs(a.jobs, || colorize_pretrain(&corpus, &enc, &pcfg))??;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("encoder.mgtc");
    let mut extra = cfg.describe();
    extra.insert("corpus_sha256".into(), outcome.corpus_hash.clone());
    extra.insert("corpus_patches".into(), corpus.len().to_string());
    outcome.extractor.save(&path, &extra)?;
    let mut text = config_text(&extra);
    text.push_str("\nepoch loss\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        text.push_str(&format!("{:>5} {l:.6}\n", i + 1));
    }
    write_file(&a.out, "pretrain_report.txt", &text)?;
    print!("{text}");
    log::info!("encoder written to {}", path.display());
    Ok(())
}

fn checkpoint_name(seed: u64, branch: Option<BandSet>) -> String {
    match branch {
        Some(b) => format!("model_seed{seed}_{}.mgtc", format!("{b:?}").to_lowercase()),
        None => format!("model_seed{seed}.mgtc"),
    }
}

fn write_report(out: &Path, stem: &str, report: &ExperimentReport) -> CliResult<String> {
    let text = report.to_text();
    write_file(out, &format!("{stem}.txt"), &text)?;
    write_file(out, &format!("{stem}.csv"), &report.to_csv())?;
    Ok(text)
}

fn train(a: &RunArgs) -> CliResult<bool> {
    let cfg = load_run_config(a)?;
    let data = load_prepared(&cfg)?;
    let e = &cfg.experiment;
    let trained = with_jobs(a.jobs, || {
        e.seeds
            .par_iter()
            .map(|&s| (s, train_seed(&data, e, s)))
            .collect::<Vec<_>>()
    })?;
    fs::create_dir_all(&a.out)?;
    let mut outcomes = Vec::new();
    for (seed, r) in trained {
        match r {
            Ok(t) => {
                let branches = e.bands.branches();
                for (m, &b) in t.models.iter().zip(branches) {
                    let name = checkpoint_name(seed, (branches.len() > 1).then_some(b));
                    m.save(&a.out.join(name))?;
                }
                outcomes.push(SeedOutcome {
                    seed,
                    result: Ok(t.result),
                });
            }
            Err(err) => {
                log::error!("seed {seed} failed: {err}");
                outcomes.push(SeedOutcome {
                    seed,
                    result: Err(err.to_string()),
                });
            }
        }
    }
    let report = ExperimentReport::from_outcomes(cfg.describe(), outcomes);
    print!("{}", write_report(&a.out, "report", &report)?);
    Ok(report.complete())
}

fn parse_split(s: &str) -> CliResult<SplitTag> {
    match SplitTag::parse(s) {
        Some(t @ (SplitTag::Train | SplitTag::Test)) => Ok(t),
        _ => Err(usage(format!("--split must be train or test, got `{s}`"))),
    }
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let mut cfg = load_run_config(&a.run)?;
    if a.checkpoint.len() > 2 {
        return Err(usage("at most two checkpoints"));
    }
    let models = a
        .checkpoint
        .iter()
        .map(|p| GraphModel::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    // model axes come from the checkpoint
    let first = &models[0];
    cfg.experiment.gnn = first.gnn.clone();
    cfg.experiment.encoder = first.encoder.clone();
    let data = load_prepared(&cfg)?;
    let split = parse_split(&a.split)?;
    let (samples, records) = data.samples(split)?;
    let probs = with_jobs(a.run.jobs, || {
        models
            .par_iter()
            .map(|m| m.predict(&data.pool, samples))
            .collect::<Result<Vec<_>, _>>()
    })??;
    let p: Vec<f64> = match probs.as_slice() {
        [one] => one.clone(),
        [x, y] => x.iter().zip(y).map(|(&u, &v)| ensemble_predict(u, v)).collect(),
        _ => unreachable!("one or two checkpoints"),
    };
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let m = metrics(&p, &labels, THRESHOLD)?;
    let mut d = cfg.describe();
    d.insert("split".into(), split.as_str().into());
    d.insert(
        "checkpoints".into(),
        a.checkpoint.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
    );
    let mut text = config_text(&d).replace(" = ", ": ");
    text.push_str(&format!(
        "\n{:>7} {:>7} {:>7} {:>7} {:>5} {:>5} {:>5} {:>5}\n{:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>5} {:>5} {:>5} {:>5}\n",
        "acc", "pr", "rc", "f1", "tp", "fp", "tn", "fn", m.accuracy, m.precision, m.recall, m.f1, m.tp, m.fp, m.tn, m.fn_
    ));
    write_file(&a.run.out, "eval_report.txt", &text)?;
    write_file(
        &a.run.out,
        "eval_report.csv",
        &format!(
            "acc,pr,rc,f1,tp,fp,tn,fn\n{},{},{},{},{},{},{},{}\n",
            m.accuracy, m.precision, m.recall, m.f1, m.tp, m.fp, m.tn, m.fn_
        ),
    )?;
    let mut preds = String::from("site_id,label,probability\n");
    for ((r, s), q) in records.iter().zip(samples).zip(&p) {
        preds.push_str(&format!("{},{},{q}\n", r.id, s.label as u8));
    }
    write_file(&a.run.out, "predictions.csv", &preds)?;
    print!("{text}");
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
        .collect()
}

fn ablate(a: &AblateArgs) -> CliResult<()> {
    let cfg = load_run_config(&a.run)?;
    let axes = a
        .axes
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Axis::parse)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let dir = cfg.data_dir()?;
    let ds = Dataset::load(dir)?;
    let cells = with_jobs(a.run.jobs, || ablation_matrix(&ds, &cfg.experiment, &axes))??;
    let cell_dir = a.run.out.join("cells");
    for (i, c) in cells.iter().enumerate() {
        let mut report = c.report.clone();
        if let Some(d) = &cfg.data {
            report.config.insert("data".into(), d.display().to_string());
        }
        write_report(&cell_dir, &format!("{i:02}_{}", sanitize(&c.label)), &report)?;
    }
    let mut table = format!("axes: {}\ncells: {}\n\n", a.axes, cells.len());
    table.push_str(&comparison_table(&cells));
    write_file(&a.run.out, "ablation.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn export(a: &ExportArgs) -> CliResult<()> {
    let mut cfg = load_run_config(&a.run)?;
    let model = GraphModel::load(&a.checkpoint)?;
    cfg.experiment.gnn = model.gnn.clone();
    let data = load_prepared(&cfg)?;
    let split = parse_split(&a.split)?;
    fs::create_dir_all(&a.run.out)?;
    let path = a.run.out.join(format!("features_{}.csv", split.as_str()));
    let file = fs::File::create(&path)?;
    let n = with_jobs(a.run.jobs, || export_features(&model, &data, split, std::io::BufWriter::new(file)))??;
    println!("wrote {n} rows to {}", path.display());
    Ok(())
}

fn selfcheck() -> bool {
    let checks = selfcheck::run();
    let mut out = std::io::stdout().lock();
    for c in &checks {
        let _ = writeln!(out, "{c}");
    }
    checks.iter().all(|c| c.passed)
}

/// Runs the command line `args` (without the program name); returns the
/// process exit code.
pub fn dispatch(args: &[String]) -> i32 {
    let argv = std::iter::once("magat".to_string()).chain(args.iter().cloned());
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenSynth(a) => gen_synth(a).map(|_| true),
        Command::Pretrain(a) => pretrain(a).map(|_| true),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Ablate(a) => ablate(a).map(|_| true),
        Command::ExportFeatures(a) => export(a).map(|_| true),
        Command::Selfcheck => Ok(selfcheck()),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `magat --help` for usage");
            }
            e.exit_code()
        }
    }
}
