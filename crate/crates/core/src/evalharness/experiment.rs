//! Seeded training runs, reports and the ablation grid.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dataset::{prepare, Adjacency, Dataset, PreparedData, SplitConfig};
use super::metrics::{metrics, summarize, MetricsBundle, THRESHOLD};
use super::{EvalError, EvalResult};
use crate::extractor::{colorize_pretrain, BandSet, BandStats, Extractor, ExtractorConfig, NormKind, PretrainConfig};
use crate::gnn::{ensemble_predict, Arch, GnnConfig, GraphModel, GraphSample};
use crate::ingest::{PatchTensor, SplitTag};
use crate::numcore::derive_seed;

/// Published real-data ensemble scores (acc, pr, rc, f1), carried in
/// reports for context only.
pub const REFERENCE_SCORES: [f64; 4] = [0.926, 0.844, 0.977, 0.905];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PretrainSource {
    None,
    /// Colorization pretext on the training patches of each seed.
    Colorization,
    /// Encoder saved by `magat pretrain`.
    Checkpoint(PathBuf),
}

impl PretrainSource {
    pub fn parse(s: &str) -> Option<Self> {
        if let Some(path) = s.strip_prefix("checkpoint:") {
            return Some(Self::Checkpoint(PathBuf::from(path)));
        }
        match s.to_ascii_lowercase().as_str() {
            "none" | "scratch" => Some(Self::None),
            "colorization" | "colorisation" => Some(Self::Colorization),
            _ => None,
        }
    }
}

impl fmt::Display for PretrainSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Colorization => f.write_str("colorization"),
            Self::Checkpoint(p) => write!(f, "checkpoint:{}", p.display()),
        }
    }
}

/// Input bands: one branch, or the average of an RGB and a spectral branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BandChoice {
    Rgb,
    Spectral,
    Ensemble,
}

impl BandChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Some(Self::Rgb),
            "spectral" => Some(Self::Spectral),
            "ensemble" | "both" => Some(Self::Ensemble),
            _ => None,
        }
    }

    pub fn branches(self) -> &'static [BandSet] {
        match self {
            Self::Rgb => &[BandSet::Rgb],
            Self::Spectral => &[BandSet::Spectral],
            Self::Ensemble => &[BandSet::Rgb, BandSet::Spectral],
        }
    }
}

impl fmt::Display for BandChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rgb => "rgb",
            Self::Spectral => "spectral",
            Self::Ensemble => "ensemble",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Encoder template; `bands` is overridden per branch.
    pub encoder: ExtractorConfig,
    pub gnn: GnnConfig,
    pub split: SplitConfig,
    pub bands: BandChoice,
    pub pretrain: PretrainSource,
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder: ExtractorConfig::default(),
            gnn: GnnConfig::default(),
            split: SplitConfig::default(),
            bands: BandChoice::Spectral,
            pretrain: PretrainSource::None,
            pretrain_epochs: 10,
            lr: 0.01,
            epochs: 20,
            batch_size: 16,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn validate(&self) -> EvalResult<()> {
        self.encoder.validate()?;
        self.gnn.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(EvalError::InvalidInput("epochs, batch_size and lr must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(EvalError::InvalidInput("no seeds".into()));
        }
        Ok(())
    }

    /// Effective configuration as `key → value`, echoed into reports.
    pub fn describe(&self) -> BTreeMap<String, String> {
        let e = &self.encoder;
        let g = &self.gnn;
        let s = &self.split;
        [
            ("arch", g.arch.to_string()),
            ("adjacency", s.adjacency.to_string()),
            ("norm", e.norm.to_string()),
            ("pretrain", self.pretrain.to_string()),
            ("bands", self.bands.to_string()),
            ("layers", g.layers.to_string()),
            ("f_int", g.f_int.to_string()),
            ("attention_norm", g.mode.to_string()),
            ("residual", g.residual.to_string()),
            ("dropout", g.dropout.to_string()),
            ("blocks", e.blocks.to_string()),
            ("base_width", e.base_width.to_string()),
            ("feature_dim", e.feature_dim.to_string()),
            ("stem_stride", e.stem_stride.to_string()),
            ("k", s.k.to_string()),
            ("sigma", s.sigma.to_string()),
            ("train_years", join(&s.train_years)),
            ("test_years", join(&s.test_years)),
            ("max_gap_days", s.max_gap_days.to_string()),
            ("nodata_threshold", s.nodata_threshold.to_string()),
            ("sinkhorn_max_iter", s.sinkhorn_max_iter.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("seeds", join(&self.seeds)),
            ("threshold", THRESHOLD.to_string()),
            ("optimizer", "sgd".to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Short cell label for comparison tables.
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}/{}",
            self.gnn.arch, self.split.adjacency, self.encoder.norm, self.pretrain, self.bands
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub metrics: MetricsBundle,
    /// Test F1 after every epoch.
    pub f1_curve: Vec<f64>,
    /// Mean training loss per epoch (averaged over branches).
    pub losses: Vec<f64>,
    /// 1-based epoch of the highest test F1 (earliest on ties).
    pub best_epoch: usize,
    pub batches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: Result<SeedResult, String>,
}

pub struct TrainedSeed {
    pub models: Vec<GraphModel>,
    pub result: SeedResult,
    pub probabilities: Vec<f64>,
}

/// Every pool entry any of `samples` touches, sorted.
fn touched(samples: &[GraphSample]) -> Vec<usize> {
    let mut v: Vec<usize> = samples.iter().flat_map(|s| s.nodes.iter().copied()).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Trains one model per band branch for `seed` and evaluates on the test
/// split after every epoch.
pub fn train_seed(data: &PreparedData, cfg: &ExperimentConfig, seed: u64) -> EvalResult<TrainedSeed> {
    cfg.validate()?;
    if data.adjacency != cfg.split.adjacency {
        return Err(EvalError::InvalidInput(format!(
            "data prepared for adjacency {}, config asks for {}",
            data.adjacency, cfg.split.adjacency
        )));
    }
    let depth = cfg.split.adjacency.depth();
    let train_pool: Vec<&PatchTensor> = touched(&data.train).into_iter().map(|i| &data.pool[i]).collect();
    let stats = BandStats::fit(train_pool.iter().copied());

    let mut models = Vec::new();
    let mut rngs = Vec::new();
    for (b, &bands) in cfg.bands.branches().iter().enumerate() {
        let b = b as u64;
        let enc = ExtractorConfig {
            bands,
            ..cfg.encoder.clone()
        };
        let mut model = GraphModel::new(enc.clone(), cfg.gnn.clone(), depth, derive_seed(seed, 10 + b))?;
        model.input = stats.clone();
        match &cfg.pretrain {
            PretrainSource::None => {}
            PretrainSource::Colorization => {
                let corpus: Vec<PatchTensor> = train_pool.iter().map(|&p| p.clone()).collect();
                let pcfg = PretrainConfig {
                    epochs: cfg.pretrain_epochs,
                    lr: cfg.lr,
                    batch_size: cfg.batch_size,
                    seed: derive_seed(seed, 20 + b),
                };
                let out = colorize_pretrain(&corpus, &enc, &pcfg)?;
                model.load_encoder(&out.extractor)?;
            }
            PretrainSource::Checkpoint(path) => {
                model.load_encoder(&Extractor::load(path)?)?;
            }
        }
        models.push(model);
        rngs.push(ChaCha8Rng::seed_from_u64(derive_seed(seed, 30 + b)));
    }

    let labels: Vec<f64> = data.test.iter().map(|s| s.label).collect();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut f1_curve = Vec::with_capacity(cfg.epochs);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut batches = 0;
    let mut probabilities = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (model, rng) in models.iter_mut().zip(rngs.iter_mut()) {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&GraphSample> = chunk.iter().map(|&i| &data.train[i]).collect();
                // training-batch log check: every node patch must be a training sample
                if let Some(&bad) = batch
                    .iter()
                    .flat_map(|s| s.nodes.iter())
                    .find(|&&i| data.pool_split[i] != SplitTag::Train)
                {
                    return Err(EvalError::Leak(format!(
                        "pool entry {bad} tagged {} reached a training batch",
                        data.pool_split[bad].as_str()
                    )));
                }
                let loss = model.train_batch(&data.pool, &batch, cfg.lr, rng)?;
                if !loss.is_finite() {
                    return Err(EvalError::InvalidInput(format!("non-finite loss at epoch {}", epoch + 1)));
                }
                epoch_loss += loss;
                steps += 1;
                batches += 1;
            }
        }
        losses.push(epoch_loss / steps as f64);
        let per_branch = models
            .iter()
            .map(|m| m.predict(&data.pool, &data.test))
            .collect::<Result<Vec<_>, _>>()?;
        probabilities = match per_branch.as_slice() {
            [one] => one.clone(),
            [a, b] => a.iter().zip(b).map(|(&x, &y)| ensemble_predict(x, y)).collect(),
            _ => unreachable!("one or two branches"),
        };
        let m = metrics(&probabilities, &labels, THRESHOLD)?;
        log::debug!("seed {seed} epoch {} loss {:.4} test f1 {:.4}", epoch + 1, losses[epoch], m.f1);
        f1_curve.push(m.f1);
    }
    let metrics = metrics(&probabilities, &labels, THRESHOLD)?;
    let best_epoch = f1_curve
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &f)| if f > acc.1 { (i, f) } else { acc })
        .0
        + 1;
    Ok(TrainedSeed {
        models,
        result: SeedResult {
            metrics,
            f1_curve,
            losses,
            best_epoch,
            batches,
        },
        probabilities,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<SeedOutcome>,
    /// Over completed seeds, `[acc, pr, rc, f1]`.
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl ExperimentReport {
    pub fn from_outcomes(config: BTreeMap<String, String>, seeds: Vec<SeedOutcome>) -> Self {
        let done: Vec<MetricsBundle> = seeds.iter().filter_map(|s| s.result.as_ref().ok().map(|r| r.metrics)).collect();
        let (mean, std) = summarize(&done);
        Self { config, seeds, mean, std }
    }

    pub fn complete(&self) -> bool {
        self.seeds.iter().all(|s| s.result.is_ok())
    }

    pub fn mean_f1(&self) -> f64 {
        self.mean[3]
    }

    fn completed(&self) -> impl Iterator<Item = &SeedResult> {
        self.seeds.iter().filter_map(|s| s.result.as_ref().ok())
    }

    pub fn mean_best_epoch(&self) -> f64 {
        let v: Vec<f64> = self.completed().map(|r| r.best_epoch as f64).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Mean test F1 per epoch across completed seeds.
    pub fn mean_curve(&self) -> Vec<f64> {
        let runs: Vec<&SeedResult> = self.completed().collect();
        let len = runs.iter().map(|r| r.f1_curve.len()).min().unwrap_or(0);
        (0..len)
            .map(|e| runs.iter().map(|r| r.f1_curve[e]).sum::<f64>() / runs.len() as f64)
            .collect()
    }

    /// `key: value` header followed by a metric table (acc, pr, rc, f1).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(out, "{k}: {v}");
        }
        let r = REFERENCE_SCORES;
        let _ = writeln!(
            out,
            "reference (real data, context only): acc {:.3} pr {:.3} rc {:.3} f1 {:.3}",
            r[0], r[1], r[2], r[3]
        );
        let _ = writeln!(out, "complete: {}", self.complete());
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<8} {:>7} {:>7} {:>7} {:>7} {:>5} {:>5} {:>5} {:>5} {:>5}", "seed", "acc", "pr", "rc", "f1", "tp", "fp", "tn", "fn", "best");
        for s in &self.seeds {
            match &s.result {
                Ok(r) => {
                    let m = r.metrics;
                    let _ = writeln!(
                        out,
                        "{:<8} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>5} {:>5} {:>5} {:>5} {:>5}",
                        s.seed, m.accuracy, m.precision, m.recall, m.f1, m.tp, m.fp, m.tn, m.fn_, r.best_epoch
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{:<8} failed: {e}", s.seed);
                }
            }
        }
        let row = |name: &str, v: [f64; 4]| format!("{name:<8} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n", v[0], v[1], v[2], v[3]);
        out.push_str(&row("mean", self.mean));
        out.push_str(&row("std", self.std));
        let curve: Vec<String> = self.mean_curve().iter().map(|f| format!("{f:.4}")).collect();
        let _ = writeln!(out, "f1_curve: {}", curve.join(" "));
        out
    }

    /// One row per seed plus mean and std rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,status,acc,pr,rc,f1,tp,fp,tn,fn,best_epoch\n");
        for s in &self.seeds {
            match &s.result {
                Ok(r) => {
                    let m = r.metrics;
                    let _ = writeln!(
                        out,
                        "{},ok,{},{},{},{},{},{},{},{},{}",
                        s.seed, m.accuracy, m.precision, m.recall, m.f1, m.tp, m.fp, m.tn, m.fn_, r.best_epoch
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{},failed: {},,,,,,,,,", s.seed, e.replace(',', ";"));
                }
            }
        }
        for (name, v) in [("mean", self.mean), ("std", self.std)] {
            let _ = writeln!(out, "{name},,{},{},{},{},,,,,", v[0], v[1], v[2], v[3]);
        }
        out
    }
}

/// Runs every seed on already prepared data; failures are recorded per seed.
pub fn run_prepared(data: &PreparedData, cfg: &ExperimentConfig) -> EvalResult<ExperimentReport> {
    cfg.validate()?;
    let outcomes = cfg
        .seeds
        .par_iter()
        .map(|&seed| SeedOutcome {
            seed,
            result: train_seed(data, cfg, seed).map(|t| t.result).map_err(|e| {
                log::error!("seed {seed} failed: {e}");
                e.to_string()
            }),
        })
        .collect();
    Ok(ExperimentReport::from_outcomes(cfg.describe(), outcomes))
}

pub fn run_experiment(dataset: &Dataset, cfg: &ExperimentConfig) -> EvalResult<ExperimentReport> {
    let data = prepare(dataset, &cfg.split)?;
    run_prepared(&data, cfg)
}

/// One ablation axis with the values to sweep.
#[derive(Clone, Debug, PartialEq)]
pub enum Axis {
    Adjacency(Vec<Adjacency>),
    Norm(Vec<NormKind>),
    Pretrain(Vec<PretrainSource>),
    Arch(Vec<Arch>),
    Bands(Vec<BandChoice>),
}

impl Axis {
    /// Full value range of a named axis.
    pub fn full(name: &str) -> EvalResult<Self> {
        Ok(match name.trim().to_ascii_lowercase().as_str() {
            "adjacency" => Axis::Adjacency(Adjacency::ALL.to_vec()),
            "norm" => Axis::Norm(vec![NormKind::Bn, NormKind::Cbn]),
            "pretrain" => Axis::Pretrain(vec![PretrainSource::None, PretrainSource::Colorization]),
            "arch" => Axis::Arch(Arch::ALL.to_vec()),
            "bands" => Axis::Bands(vec![BandChoice::Rgb, BandChoice::Spectral, BandChoice::Ensemble]),
            other => return Err(EvalError::InvalidAxis(other.to_string())),
        })
    }

    /// `name=v1|v2|…` or a bare name for the full range.
    pub fn parse(spec: &str) -> EvalResult<Self> {
        let Some((name, values)) = spec.split_once('=') else {
            return Self::full(spec);
        };
        let bad = |v: &str| EvalError::InvalidAxis(format!("{name}={v}"));
        let vals = values.split('|').map(str::trim);
        Ok(match name.trim().to_ascii_lowercase().as_str() {
            "adjacency" => Axis::Adjacency(vals.map(|v| Adjacency::parse(v).ok_or_else(|| bad(v))).collect::<EvalResult<_>>()?),
            "norm" => Axis::Norm(vals.map(|v| NormKind::parse(v).ok_or_else(|| bad(v))).collect::<EvalResult<_>>()?),
            "pretrain" => Axis::Pretrain(vals.map(|v| PretrainSource::parse(v).ok_or_else(|| bad(v))).collect::<EvalResult<_>>()?),
            "arch" => Axis::Arch(vals.map(|v| Arch::parse(v).ok_or_else(|| bad(v))).collect::<EvalResult<_>>()?),
            "bands" => Axis::Bands(vals.map(|v| BandChoice::parse(v).ok_or_else(|| bad(v))).collect::<EvalResult<_>>()?),
            other => return Err(EvalError::InvalidAxis(other.to_string())),
        })
    }

    fn len(&self) -> usize {
        match self {
            Axis::Adjacency(v) => v.len(),
            Axis::Norm(v) => v.len(),
            Axis::Pretrain(v) => v.len(),
            Axis::Arch(v) => v.len(),
            Axis::Bands(v) => v.len(),
        }
    }

    fn apply(&self, i: usize, cfg: &mut ExperimentConfig) {
        match self {
            Axis::Adjacency(v) => cfg.split.adjacency = v[i],
            Axis::Norm(v) => cfg.encoder.norm = v[i],
            Axis::Pretrain(v) => cfg.pretrain = v[i].clone(),
            Axis::Arch(v) => cfg.gnn.arch = v[i],
            Axis::Bands(v) => cfg.bands = v[i],
        }
    }
}

/// Cartesian product of the axes applied to `base`, first axis slowest.
pub fn ablation_cells(base: &ExperimentConfig, axes: &[Axis]) -> EvalResult<Vec<ExperimentConfig>> {
    if let Some(a) = axes.iter().find(|a| a.len() == 0) {
        return Err(EvalError::InvalidAxis(format!("{a:?} has no values")));
    }
    let mut cells = vec![base.clone()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                (0..axis.len()).map(move |i| {
                    let mut c = c.clone();
                    axis.apply(i, &mut c);
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub label: String,
    pub report: ExperimentReport,
}

/// Runs every cell; graphs are prepared once per distinct split setting.
pub fn ablation_matrix(dataset: &Dataset, base: &ExperimentConfig, axes: &[Axis]) -> EvalResult<Vec<AblationCell>> {
    let cells = ablation_cells(base, axes)?;
    let mut prepared: HashMap<Adjacency, PreparedData> = HashMap::new();
    for c in &cells {
        if !prepared.contains_key(&c.split.adjacency) {
            prepared.insert(c.split.adjacency, prepare(dataset, &c.split)?);
        }
    }
    cells
        .par_iter()
        .map(|c| {
            Ok(AblationCell {
                label: c.label(),
                report: run_prepared(&prepared[&c.split.adjacency], c)?,
            })
        })
        .collect()
}

pub fn comparison_table(cells: &[AblationCell]) -> String {
    let width = cells.iter().map(|c| c.label.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "cell", "acc", "pr", "rc", "f1", "f1_std");
    for c in cells {
        let m = c.report.mean;
        let _ = writeln!(
            out,
            "{:<width$} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            c.label, m[0], m[1], m[2], m[3], c.report.std[3]
        );
    }
    out
}

/// Writes final-layer pivot features as `site_id,label,f_0,…` CSV.
pub fn export_features(model: &GraphModel, data: &PreparedData, split: SplitTag, out: impl Write) -> EvalResult<usize> {
    let (samples, _) = data.samples(split)?;
    if model.gnn.arch.uses_graph() && model.depth != data.adjacency.depth() {
        return Err(EvalError::InvalidInput(format!(
            "checkpoint expects {} affinity slices, data has {}",
            model.depth,
            data.adjacency.depth()
        )));
    }
    let feats = model.pivot_features(&data.pool, samples)?;
    let width = feats.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["site_id".to_string(), "label".to_string()];
    header.extend((0..width).map(|k| format!("f_{k}")));
    w.write_record(&header)?;
    for (s, f) in samples.iter().zip(&feats) {
        let mut row = vec![s.site_id.to_string(), format!("{}", s.label as u8)];
        row.extend(f.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_counts_are_axis_products() {
        let base = ExperimentConfig::default();
        assert_eq!(ablation_cells(&base, &[]).unwrap(), vec![base.clone()]);
        let norm = ablation_cells(&base, &[Axis::full("norm").unwrap()]).unwrap();
        assert_eq!(norm.len(), 2);
        assert_eq!(norm[0].encoder.norm, NormKind::Bn);
        assert_eq!(norm[1].encoder.norm, NormKind::Cbn);
        let adj = Axis::parse("adjacency=uniform|lst|ssm|lst+ssm|all").unwrap();
        let grid = ablation_cells(&base, &[adj, Axis::full("bands").unwrap()]).unwrap();
        assert_eq!(grid.len(), 15);
        let labels: std::collections::HashSet<_> = grid.iter().map(ExperimentConfig::label).collect();
        assert_eq!(labels.len(), 15);
        assert!(matches!(Axis::parse("colour"), Err(EvalError::InvalidAxis(_))));
        assert!(matches!(Axis::parse("norm=bn|layer"), Err(EvalError::InvalidAxis(_))));
    }

    #[test]
    fn report_means_and_failures() {
        let ok = |seed, tp, fp, tn, fn_| SeedOutcome {
            seed,
            result: Ok(SeedResult {
                metrics: MetricsBundle::from_counts(tp, fp, tn, fn_).unwrap(),
                f1_curve: vec![0.1, 0.5],
                losses: vec![0.7, 0.6],
                best_epoch: 2,
                batches: 4,
            }),
        };
        let failed = SeedOutcome {
            seed: 9,
            result: Err("boom, twice".into()),
        };
        let r = ExperimentReport::from_outcomes(BTreeMap::new(), vec![ok(0, 3, 1, 5, 1), ok(1, 2, 2, 4, 2), failed]);
        assert!(!r.complete());
        let f1s: Vec<f64> = r.completed().map(|s| s.metrics.f1).collect();
        assert!((r.mean_f1() - (f1s[0] + f1s[1]) / 2.0).abs() < 1e-12);
        assert_eq!(r.mean_curve(), vec![0.1, 0.5]);
        let text = r.to_text();
        assert!(text.contains("failed: boom, twice"));
        assert!(text.contains("complete: false"));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 + 2);
        assert!(csv.lines().all(|l| l.split(',').count() == 11));
    }
}
