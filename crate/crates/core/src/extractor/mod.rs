//! Residual convolutional encoder mapping a multi-band patch to a node
//! feature vector, with month-conditioned normalisation, and the
//! colorization pretext used to initialise it.

mod pretrain;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ingest::{Band, PatchTensor, SitePatch};
use crate::numcore::ops::{month_rows, BN_EPSILON, MONTHS};
use crate::numcore::{
    init_he, init_normal, BnStats, Checkpoint, DenseArray, Mode, NumError, ParamSet, RunningStats,
    Tape, Var,
};

pub use pretrain::{colorize_pretrain, corpus_hash, PretrainConfig, PretrainOutcome};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("patch carries {got} input channels, config expects {expected}")]
    BandMismatch { expected: usize, got: usize },
    #[error("pretraining corpus lacks usable RGB bands: {0}")]
    MissingRgb(String),
    #[error("invalid extractor config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type ExtractResult<T> = Result<T, ExtractError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BandSet {
    Rgb,
    Spectral,
    All,
}

impl BandSet {
    pub fn bands(self) -> &'static [Band] {
        match self {
            BandSet::Rgb => &Band::RGB,
            BandSet::Spectral => &Band::SPECTRAL,
            BandSet::All => &Band::ALL,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Some(BandSet::Rgb),
            "spectral" => Some(BandSet::Spectral),
            "all" => Some(BandSet::All),
            _ => None,
        }
    }
}

impl fmt::Display for BandSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BandSet::Rgb => "rgb",
            BandSet::Spectral => "spectral",
            BandSet::All => "all",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormKind {
    Bn,
    Cbn,
}

impl NormKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Some(NormKind::Bn),
            "cbn" => Some(NormKind::Cbn),
            _ => None,
        }
    }

    fn rows(self) -> usize {
        match self {
            NormKind::Bn => 1,
            NormKind::Cbn => MONTHS,
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Bn => "bn",
            NormKind::Cbn => "cbn",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub bands: BandSet,
    pub blocks: usize,
    /// Channels of the stem and first block; each later block doubles it.
    pub base_width: usize,
    pub feature_dim: usize,
    pub norm: NormKind,
    pub stem_stride: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            bands: BandSet::Spectral,
            blocks: 4,
            base_width: 16,
            feature_dim: 128,
            norm: NormKind::Cbn,
            stem_stride: 1,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> ExtractResult<()> {
        if self.blocks == 0 || self.base_width == 0 || self.feature_dim == 0 {
            return Err(ExtractError::InvalidConfig(
                "blocks, base_width and feature_dim must be positive".into(),
            ));
        }
        if !(1..=2).contains(&self.stem_stride) {
            return Err(ExtractError::InvalidConfig("stem_stride must be 1 or 2".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.bands.bands().len()
    }

    pub fn block_width(&self, i: usize) -> usize {
        self.base_width << i
    }

    pub fn trunk_channels(&self) -> usize {
        self.block_width(self.blocks - 1)
    }

    /// Number of stride-2 stages between input and trunk output.
    pub fn downsamplings(&self) -> usize {
        usize::from(self.stem_stride == 2) + self.blocks - 1
    }

    fn block_stride(i: usize) -> usize {
        if i == 0 {
            1
        } else {
            2
        }
    }

    fn needs_skip(&self, i: usize) -> bool {
        let cin = if i == 0 { self.base_width } else { self.block_width(i - 1) };
        i > 0 || cin != self.block_width(i)
    }

    /// Names of the normalisation layers with their channel counts.
    pub fn norm_layers(&self, prefix: &str) -> Vec<(String, usize)> {
        let mut out = vec![(format!("{prefix}.stem.norm"), self.base_width)];
        for i in 0..self.blocks {
            let w = self.block_width(i);
            out.push((format!("{prefix}.b{i}.norm1"), w));
            out.push((format!("{prefix}.b{i}.norm2"), w));
        }
        out
    }

    /// Adds freshly initialised encoder parameters under `prefix`.
    pub fn init_params(&self, prefix: &str, seed: u64, params: &mut ParamSet) -> ExtractResult<()> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |o: usize, c: usize, k: usize, rng: &mut ChaCha8Rng| {
            init_he(&[o, c, k, k], c * k * k, rng)
        };
        params.insert(format!("{prefix}.stem.w"), conv(self.base_width, self.in_channels(), 3, &mut rng))?;
        for (name, c) in self.norm_layers(prefix) {
            params.insert(format!("{name}.gamma"), DenseArray::full(&[self.norm.rows(), c], 1.0))?;
            params.insert(format!("{name}.beta"), DenseArray::zeros(&[self.norm.rows(), c]))?;
        }
        for i in 0..self.blocks {
            let w = self.block_width(i);
            let cin = if i == 0 { self.base_width } else { self.block_width(i - 1) };
            params.insert(format!("{prefix}.b{i}.conv1.w"), conv(w, cin, 3, &mut rng))?;
            params.insert(format!("{prefix}.b{i}.conv2.w"), conv(w, w, 3, &mut rng))?;
            if self.needs_skip(i) {
                params.insert(format!("{prefix}.b{i}.skip.w"), conv(w, cin, 1, &mut rng))?;
            }
        }
        let c = self.trunk_channels();
        params.insert(
            format!("{prefix}.fc.w"),
            init_normal(&[c, self.feature_dim], c, self.feature_dim, &mut rng),
        )?;
        params.insert(format!("{prefix}.fc.b"), DenseArray::zeros(&[1, self.feature_dim]))?;
        Ok(())
    }

    pub fn new_norm_state(&self, prefix: &str) -> NormState {
        NormState(
            self.norm_layers(prefix)
                .into_iter()
                .map(|(n, c)| (n, RunningStats::new(c)))
                .collect(),
        )
    }

    /// `key = value` description, used in checkpoint manifests.
    pub fn describe(&self) -> BTreeMap<String, String> {
        [
            ("bands", self.bands.to_string()),
            ("blocks", self.blocks.to_string()),
            ("base_width", self.base_width.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("norm", self.norm.to_string()),
            ("stem_stride", self.stem_stride.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_description(d: &BTreeMap<String, String>) -> ExtractResult<Self> {
        let get = |k: &str| {
            d.get(k)
                .ok_or_else(|| ExtractError::InvalidConfig(format!("missing `{k}`")))
        };
        let num = |k: &str| -> ExtractResult<usize> {
            get(k)?
                .parse()
                .map_err(|_| ExtractError::InvalidConfig(format!("bad `{k}`")))
        };
        let cfg = Self {
            bands: BandSet::parse(get("bands")?)
                .ok_or_else(|| ExtractError::InvalidConfig("bad `bands`".into()))?,
            blocks: num("blocks")?,
            base_width: num("base_width")?,
            feature_dim: num("feature_dim")?,
            norm: NormKind::parse(get("norm")?)
                .ok_or_else(|| ExtractError::InvalidConfig("bad `norm`".into()))?,
            stem_stride: num("stem_stride")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Running statistics of every normalisation layer, keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormState(pub BTreeMap<String, RunningStats>);

impl NormState {
    pub fn to_entries(&self) -> BTreeMap<String, DenseArray> {
        let mut out = BTreeMap::new();
        for (name, s) in &self.0 {
            out.insert(format!("{name}.running_mean"), DenseArray::vector(s.mean.clone()));
            out.insert(format!("{name}.running_var"), DenseArray::vector(s.var.clone()));
        }
        out
    }

    /// Overwrites the layers present in `entries`; returns how many were found.
    pub fn load_entries(&mut self, entries: &BTreeMap<String, DenseArray>) -> usize {
        let mut n = 0;
        for (name, s) in self.0.iter_mut() {
            let (m, v) = (
                entries.get(&format!("{name}.running_mean")),
                entries.get(&format!("{name}.running_var")),
            );
            if let (Some(m), Some(v)) = (m, v) {
                if m.len() == s.mean.len() && v.len() == s.var.len() {
                    s.mean = m.data().to_vec();
                    s.var = v.data().to_vec();
                    n += 1;
                }
            }
        }
        n
    }
}

/// Per-band input standardisation fitted on training patches.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStats {
    pub mean: [f64; 7],
    pub std: [f64; 7],
}

impl Default for BandStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 7],
            std: [1.0; 7],
        }
    }
}

impl BandStats {
    /// Mean and standard deviation of each band over valid pixels.
    pub fn fit<'a>(patches: impl IntoIterator<Item = &'a PatchTensor>) -> Self {
        let mut sum = [0.0; 7];
        let mut sq = [0.0; 7];
        let mut n = 0usize;
        for p in patches {
            for b in Band::ALL {
                for (&v, &m) in p.band(b).iter().zip(p.nodata_mask()) {
                    if !m {
                        sum[b.index()] += f64::from(v);
                        sq[b.index()] += f64::from(v).powi(2);
                    }
                }
            }
            n += p.nodata_mask().iter().filter(|&&m| !m).count();
        }
        let mut out = Self::default();
        if n == 0 {
            return out;
        }
        for i in 0..7 {
            let mean = sum[i] / n as f64;
            let var = (sq[i] / n as f64 - mean * mean).max(0.0);
            out.mean[i] = mean;
            out.std[i] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn to_entries(&self) -> BTreeMap<String, DenseArray> {
        BTreeMap::from([
            ("input.mean".to_string(), DenseArray::vector(self.mean.to_vec())),
            ("input.std".to_string(), DenseArray::vector(self.std.to_vec())),
        ])
    }

    pub fn from_entries(entries: &BTreeMap<String, DenseArray>) -> Option<Self> {
        let (m, s) = (entries.get("input.mean")?, entries.get("input.std")?);
        Some(Self {
            mean: m.data().try_into().ok()?,
            std: s.data().try_into().ok()?,
        })
    }
}

/// Stacks the selected bands of `patches` into a standardised
/// `B×C×S×S` array. NoData pixels keep their sentinel value, which is
/// standardised like any other value.
pub fn prepare_batch(
    patches: &[&PatchTensor],
    bands: &[Band],
    stats: &BandStats,
) -> ExtractResult<DenseArray> {
    let Some(first) = patches.first() else {
        return Err(ExtractError::InvalidConfig("empty batch".into()));
    };
    let side = first.side();
    let px = side * side;
    let mut data = Vec::with_capacity(patches.len() * bands.len() * px);
    for p in patches {
        if p.side() != side {
            return Err(ExtractError::InvalidConfig("mixed patch sizes in a batch".into()));
        }
        for &b in bands {
            let (m, s) = (stats.mean[b.index()], stats.std[b.index()]);
            data.extend(p.band(b).iter().map(|&v| (f64::from(v) - m) / s));
        }
    }
    Ok(DenseArray::new(vec![patches.len(), bands.len(), side, side], data)?)
}

/// Everything the encoder's forward pass needs besides the parameters.
pub struct EncoderPass<'a> {
    pub config: &'a ExtractorConfig,
    pub prefix: &'a str,
    pub mode: Mode,
    pub state: &'a mut NormState,
}

impl EncoderPass<'_> {
    fn norm(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        name: &str,
        x: Var,
        rows: &[usize],
    ) -> ExtractResult<Var> {
        let g = tape.param(params, &format!("{name}.gamma"))?;
        let b = tape.param(params, &format!("{name}.beta"))?;
        let running = self
            .state
            .0
            .get_mut(name)
            .ok_or_else(|| ExtractError::InvalidConfig(format!("no running stats for `{name}`")))?;
        let stats = match self.mode {
            Mode::Train => BnStats::Batch,
            Mode::Eval => BnStats::Fixed {
                mean: running.mean.clone(),
                var: running.var.clone(),
            },
        };
        let (y, batch) = tape.batch_norm(x, g, b, rows, BN_EPSILON, stats)?;
        if let Some((mean, var, count)) = batch {
            running.update(&mean, &var, count);
        }
        Ok(y)
    }

    /// Convolutional trunk: `B×C×S×S` → `B×C'×s×s` feature maps.
    pub fn trunk(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        months: &[u8],
    ) -> ExtractResult<Var> {
        let cfg = self.config;
        let p = self.prefix;
        let got = tape.value(x).shape().get(1).copied().unwrap_or(0);
        if got != cfg.in_channels() {
            return Err(ExtractError::BandMismatch {
                expected: cfg.in_channels(),
                got,
            });
        }
        let rows = match cfg.norm {
            NormKind::Cbn => month_rows(months)?,
            NormKind::Bn => {
                month_rows(months)?;
                vec![0; months.len()]
            }
        };
        let w = tape.param(params, &format!("{p}.stem.w"))?;
        let h = tape.conv2d(x, w, cfg.stem_stride, 1)?;
        let h = self.norm(tape, params, &format!("{p}.stem.norm"), h, &rows)?;
        let mut h = tape.elu(h);
        for i in 0..cfg.blocks {
            let stride = ExtractorConfig::block_stride(i);
            let w1 = tape.param(params, &format!("{p}.b{i}.conv1.w"))?;
            let y = tape.conv2d(h, w1, stride, 1)?;
            let y = self.norm(tape, params, &format!("{p}.b{i}.norm1"), y, &rows)?;
            let y = tape.elu(y);
            let w2 = tape.param(params, &format!("{p}.b{i}.conv2.w"))?;
            let y = tape.conv2d(y, w2, 1, 1)?;
            let y = self.norm(tape, params, &format!("{p}.b{i}.norm2"), y, &rows)?;
            let skip = if cfg.needs_skip(i) {
                let ws = tape.param(params, &format!("{p}.b{i}.skip.w"))?;
                tape.conv2d(h, ws, stride, 0)?
            } else {
                h
            };
            let sum = tape.add(y, skip)?;
            h = tape.elu(sum);
        }
        Ok(h)
    }

    /// Full encoder: trunk, global average pooling, linear map to `B×F`.
    pub fn encode(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        months: &[u8],
    ) -> ExtractResult<Var> {
        let h = self.trunk(tape, params, x, months)?;
        let pooled = tape.global_avg_pool(h)?;
        let w = tape.param(params, &format!("{}.fc.w", self.prefix))?;
        let b = tape.param(params, &format!("{}.fc.b", self.prefix))?;
        let z = tape.matmul(pooled, w)?;
        let z = tape.add_row_bias(z, b)?;
        tape.value(z).ensure_finite("encoder output")?;
        Ok(z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub site_id: crate::ingest::SiteId,
    pub month: u8,
}

/// A standalone encoder with its parameters, running statistics and input
/// standardisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub prefix: String,
    pub params: ParamSet,
    pub norm: NormState,
    pub input: BandStats,
}

impl Extractor {
    pub fn new(config: ExtractorConfig, prefix: &str, seed: u64) -> ExtractResult<Self> {
        let mut params = ParamSet::new();
        config.init_params(prefix, seed, &mut params)?;
        Ok(Self {
            norm: config.new_norm_state(prefix),
            config,
            prefix: prefix.to_string(),
            params,
            input: BandStats::default(),
        })
    }

    /// Eval-mode features of a batch of patches (`B×F`).
    pub fn features_batch(&self, patches: &[&PatchTensor], months: &[u8]) -> ExtractResult<DenseArray> {
        let x = prepare_batch(patches, self.config.bands.bands(), &self.input)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut state = self.norm.clone();
        let mut pass = EncoderPass {
            config: &self.config,
            prefix: &self.prefix,
            mode: Mode::Eval,
            state: &mut state,
        };
        let z = pass.encode(&mut tape, &self.params, xv, months)?;
        Ok(tape.value(z).clone())
    }

    pub fn extract_features(&self, patch: &SitePatch, month: u8) -> ExtractResult<FeatureVector> {
        let z = self.features_batch(&[&patch.patch], &[month])?;
        Ok(FeatureVector {
            values: z.into_data(),
            site_id: patch.site_id,
            month,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = self.params.to_map();
        entries.extend(self.norm.to_entries());
        entries.extend(self.input.to_entries());
        let mut ck = Checkpoint::new(entries);
        ck.manifest = self.config.describe();
        ck.manifest.insert("prefix".into(), self.prefix.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> ExtractResult<Self> {
        let config = ExtractorConfig::from_description(&ck.manifest)?;
        let prefix = ck
            .manifest
            .get("prefix")
            .cloned()
            .unwrap_or_else(|| "enc".to_string());
        let mut ex = Self::new(config, &prefix, 0)?;
        let names: Vec<String> = ex.params.names().map(str::to_string).collect();
        for name in names {
            let v = ck
                .entries
                .get(&name)
                .ok_or_else(|| ExtractError::InvalidConfig(format!("checkpoint lacks `{name}`")))?;
            ex.params.set(&name, v.clone())?;
        }
        ex.norm.load_entries(&ck.entries);
        ex.input = BandStats::from_entries(&ck.entries).unwrap_or_default();
        Ok(ex)
    }

    /// Writes the checkpoint and a `<path>.meta` sidecar of `key = value`
    /// lines (config plus `extra`).
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> ExtractResult<()> {
        self.to_checkpoint().save(path)?;
        let mut meta = self.config.describe();
        meta.extend(extra.clone());
        let text: String = meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        std::fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> ExtractResult<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{SiteId, BAND_COUNT};
    use chrono::NaiveDate;
    use rand::Rng;

    fn patch(side: usize, seed: u64, masked: usize) -> PatchTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = side * side;
        let bands = (0..BAND_COUNT * px).map(|_| rng.random_range(0.0..0.5)).collect();
        let mask = (0..px).map(|i| i < masked).collect();
        PatchTensor::new(side, bands, mask, 20.0, NaiveDate::from_ymd_opt(2018, 6, 1).unwrap(), (44.0, 11.0))
            .unwrap()
    }

    fn small(norm: NormKind) -> ExtractorConfig {
        ExtractorConfig {
            bands: BandSet::Spectral,
            blocks: 2,
            base_width: 4,
            feature_dim: 6,
            norm,
            stem_stride: 2,
        }
    }

    #[test]
    fn default_config_gives_128_features() {
        let ex = Extractor::new(ExtractorConfig::default(), "enc", 1).unwrap();
        let sp = SitePatch {
            site_id: SiteId(3),
            patch: patch(32, 1, 0),
        };
        let f = ex.extract_features(&sp, 7).unwrap();
        assert_eq!(f.values.len(), 128);
        assert!(f.values.iter().all(|v| v.is_finite()));
        assert_eq!(f.site_id, SiteId(3));
    }

    #[test]
    fn output_dim_independent_of_input_size() {
        let ex = Extractor::new(small(NormKind::Cbn), "enc", 2).unwrap();
        for side in [16, 20, 24, 33] {
            let p = patch(side, 5, 0);
            let z = ex.features_batch(&[&p], &[4]).unwrap();
            assert_eq!(z.shape(), &[1, 6]);
        }
    }

    #[test]
    fn months_are_observable_with_distinct_rows() {
        let mut ex = Extractor::new(small(NormKind::Cbn), "enc", 3).unwrap();
        let beta = ex.params.get_mut("enc.b1.norm2.beta").unwrap();
        for c in 0..beta.cols() {
            beta.set(7, c, 0.5);
        }
        let p = patch(16, 9, 0);
        let a = ex.features_batch(&[&p], &[3]).unwrap();
        let b = ex.features_batch(&[&p], &[8]).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
        assert_eq!(a, ex.features_batch(&[&p], &[3]).unwrap());
    }

    #[test]
    fn tied_rows_reduce_to_plain_normalisation() {
        let cbn = Extractor::new(small(NormKind::Cbn), "enc", 4).unwrap();
        let mut bn = Extractor::new(small(NormKind::Bn), "enc", 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut cbn = cbn;
        for (name, c) in small(NormKind::Bn).norm_layers("enc") {
            let g: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
            let b: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            bn.params.set(&format!("{name}.gamma"), DenseArray::new(vec![1, c], g.clone()).unwrap()).unwrap();
            bn.params.set(&format!("{name}.beta"), DenseArray::new(vec![1, c], b.clone()).unwrap()).unwrap();
            let tile = |v: &[f64]| DenseArray::new(vec![12, c], v.repeat(12)).unwrap();
            cbn.params.set(&format!("{name}.gamma"), tile(&g)).unwrap();
            cbn.params.set(&format!("{name}.beta"), tile(&b)).unwrap();
        }
        let ps: Vec<_> = (0..5).map(|i| patch(16, 20 + i, 0)).collect();
        let refs: Vec<&PatchTensor> = ps.iter().collect();
        let months = [1, 4, 7, 7, 12];
        let run = |ex: &Extractor| {
            let x = prepare_batch(&refs, ex.config.bands.bands(), &ex.input).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut state = ex.norm.clone();
            let mut pass = EncoderPass {
                config: &ex.config,
                prefix: "enc",
                mode: Mode::Train,
                state: &mut state,
            };
            let z = pass.encode(&mut tape, &ex.params, xv, &months).unwrap();
            tape.value(z).clone()
        };
        assert!(run(&cbn).max_abs_diff(&run(&bn)) < 1e-6);
        let eval_diff = cbn
            .features_batch(&refs, &months)
            .unwrap()
            .max_abs_diff(&bn.features_batch(&refs, &months).unwrap());
        assert!(eval_diff < 1e-6);
    }

    #[test]
    fn mask_content_reaches_the_network() {
        let ex = Extractor::new(small(NormKind::Bn), "enc", 5).unwrap();
        let clear = patch(16, 30, 0);
        let cloudy = patch(16, 30, 12);
        let a = ex.features_batch(&[&clear], &[6]).unwrap();
        let b = ex.features_batch(&[&cloudy], &[6]).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn band_mismatch_and_bad_month() {
        let ex = Extractor::new(small(NormKind::Cbn), "enc", 6).unwrap();
        let p = patch(16, 1, 0);
        let x = prepare_batch(&[&p], BandSet::Rgb.bands(), &ex.input).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut state = ex.norm.clone();
        let mut pass = EncoderPass {
            config: &ex.config,
            prefix: "enc",
            mode: Mode::Eval,
            state: &mut state,
        };
        assert!(matches!(
            pass.encode(&mut tape, &ex.params, xv, &[5]),
            Err(ExtractError::BandMismatch { expected: 4, got: 3 })
        ));
        assert!(ex.features_batch(&[&p], &[13]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_with_sidecar() {
        let mut ex = Extractor::new(small(NormKind::Cbn), "enc", 7).unwrap();
        ex.input = BandStats::fit([&patch(16, 1, 3)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.mgtc");
        let extra = BTreeMap::from([("seed".to_string(), "7".to_string())]);
        ex.save(&path, &extra).unwrap();
        let back = Extractor::load(&path).unwrap();
        assert_eq!(back.config, ex.config);
        let p = patch(16, 2, 0);
        // stored as f32, so compare at single precision
        let d = back
            .features_batch(&[&p], &[2])
            .unwrap()
            .max_abs_diff(&ex.features_batch(&[&p], &[2]).unwrap());
        assert!(d < 1e-4);
        let meta = std::fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(meta.contains("seed = 7"));
        assert!(meta.contains("norm = cbn"));
    }
}
