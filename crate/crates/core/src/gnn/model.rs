//! Encoder + graph stack + pivot head as one trainable model.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, MagatSettings};
use super::{AttnNorm, GnnError, GnnResult};
use crate::extractor::{prepare_batch, BandStats, EncoderPass, Extractor, ExtractorConfig, NormState};
use crate::graphbuild::{AffinityStack, SINKHORN_TOL};
use crate::ingest::{PatchTensor, SiteId};
use crate::numcore::ops::dropout_mask;
use crate::numcore::{
    derive_seed, init_normal, sgd_step, Activation, Checkpoint, DenseArray, Mode, ParamSet, Tape, Var,
};

const ENC: &str = "enc";
/// Patches per eval-mode encoder call.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Magat,
    Gcn,
    Gat,
    FusionGcn,
    /// Encoder features of the pivot through dense layers, no graph.
    NodeOnly,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Magat, Arch::Gcn, Arch::Gat, Arch::FusionGcn, Arch::NodeOnly];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "magat" => Some(Self::Magat),
            "gcn" => Some(Self::Gcn),
            "gat" => Some(Self::Gat),
            "fusion_gcn" | "fusion" => Some(Self::FusionGcn),
            "node_only" | "node" => Some(Self::NodeOnly),
            _ => None,
        }
    }

    pub fn uses_graph(self) -> bool {
        self != Arch::NodeOnly
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Magat => "magat",
            Arch::Gcn => "gcn",
            Arch::Gat => "gat",
            Arch::FusionGcn => "fusion_gcn",
            Arch::NodeOnly => "node_only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnConfig {
    pub arch: Arch,
    pub layers: usize,
    /// Per-head width of the attention layers; baselines use `3·f_int`.
    pub f_int: usize,
    pub mode: AttnNorm,
    pub residual: bool,
    /// Drop probability on the pivot row before the head.
    pub dropout: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Magat,
            layers: 2,
            f_int: 64,
            mode: AttnNorm::Sinkhorn,
            residual: true,
            dropout: 0.2,
            tol: SINKHORN_TOL,
            max_iter: super::ATTENTION_MAX_ITER,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> GnnResult<()> {
        if self.layers == 0 || self.f_int == 0 {
            return Err(GnnError::InvalidConfig("layers and f_int must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GnnError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// `(F_in, F_out)` of every layer for input width `f0` and `depth` slices.
    pub fn layer_dims(&self, f0: usize, depth: usize) -> Vec<(usize, usize)> {
        let out = match self.arch {
            Arch::Magat => depth * self.f_int,
            _ => 3 * self.f_int,
        };
        (0..self.layers)
            .map(|l| (if l == 0 { f0 } else { out }, out))
            .collect()
    }
}

/// One pivot-centred training or evaluation example. `nodes` index into a
/// patch pool; node 0 is the pivot.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSample {
    pub site_id: SiteId,
    pub nodes: Vec<usize>,
    pub affinities: AffinityStack,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphModel {
    pub encoder: ExtractorConfig,
    pub gnn: GnnConfig,
    /// Number of affinity slices `G`.
    pub depth: usize,
    /// Encoder (`enc.*`), graph (`gnn.*`) and head (`head.*`) parameters.
    pub params: ParamSet,
    pub norm: NormState,
    pub input: BandStats,
}

fn adjacency_mean(s: &AffinityStack) -> DenseArray {
    let mut a = DenseArray::zeros(s.slice(0).shape());
    for sl in s.slices() {
        a.add_assign(sl);
    }
    a.map(|v| v / s.depth() as f64)
}

fn binary_adjacency(s: &AffinityStack) -> DenseArray {
    let n = s.nodes();
    let mut a = DenseArray::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i == j || s.slices().iter().any(|m| m.at(i, j) > 0.0) {
                a.set(i, j, 1.0);
            }
        }
    }
    a
}

impl GraphModel {
    pub fn new(encoder: ExtractorConfig, gnn: GnnConfig, depth: usize, seed: u64) -> GnnResult<Self> {
        gnn.validate()?;
        if depth == 0 {
            return Err(GnnError::InvalidConfig("at least one affinity slice".into()));
        }
        let mut params = ParamSet::new();
        encoder.init_params(ENC, derive_seed(seed, 1), &mut params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
        let f_int = gnn.f_int;
        let dims = gnn.layer_dims(encoder.feature_dim, depth);
        for (l, &(fi, fo)) in dims.iter().enumerate() {
            let p = format!("gnn.l{l}");
            match gnn.arch {
                Arch::Magat => {
                    for g in 0..depth {
                        params.insert(format!("{p}.h{g}.V"), init_normal(&[fi, f_int], fi, f_int, &mut rng))?;
                        params.insert(format!("{p}.h{g}.p"), init_normal(&[2 * f_int, 1], 2 * f_int, 1, &mut rng))?;
                        params.insert(format!("{p}.h{g}.W"), init_normal(&[fi, f_int], fi, f_int, &mut rng))?;
                    }
                    if gnn.residual {
                        params.insert(format!("{p}.U"), init_normal(&[fi, fo], fi, fo, &mut rng))?;
                    }
                }
                Arch::Gcn | Arch::NodeOnly => {
                    params.insert(format!("{p}.W"), init_normal(&[fi, fo], fi, fo, &mut rng))?;
                }
                Arch::Gat => {
                    params.insert(format!("{p}.W"), init_normal(&[fi, fo], fi, fo, &mut rng))?;
                    params.insert(format!("{p}.a"), init_normal(&[2 * fo, 1], 2 * fo, 1, &mut rng))?;
                }
                Arch::FusionGcn => {
                    for g in 0..depth {
                        params.insert(format!("{p}.g{g}.W"), init_normal(&[fi, fo], fi, fo, &mut rng))?;
                    }
                    params.insert(format!("{p}.beta"), DenseArray::zeros(&[1, depth]))?;
                }
            }
        }
        let f = dims.last().map(|d| d.1).unwrap_or(encoder.feature_dim);
        params.insert("head.w", init_normal(&[f, 1], f, 1, &mut rng))?;
        params.insert("head.b", DenseArray::zeros(&[1, 1]))?;
        Ok(Self {
            norm: encoder.new_norm_state(ENC),
            encoder,
            gnn,
            depth,
            params,
            input: BandStats::default(),
        })
    }

    /// Copies every matching encoder tensor, running statistic and the input
    /// standardisation from a pretrained extractor.
    pub fn load_encoder(&mut self, ex: &Extractor) -> GnnResult<usize> {
        if ex.config != self.encoder {
            return Err(GnnError::InvalidConfig(format!(
                "pretrained encoder {:?} does not match {:?}",
                ex.config.describe(),
                self.encoder.describe()
            )));
        }
        let renamed: BTreeMap<String, DenseArray> = ex
            .params
            .iter()
            .map(|(n, v)| (format!("{ENC}{}", &n[ex.prefix.len()..]), v.clone()))
            .collect();
        let n = self.params.load_matching(&renamed);
        let norm: BTreeMap<String, DenseArray> = ex
            .norm
            .to_entries()
            .into_iter()
            .map(|(n, v)| (format!("{ENC}{}", &n[ex.prefix.len()..]), v))
            .collect();
        self.norm.load_entries(&norm);
        self.input = ex.input.clone();
        Ok(n)
    }

    pub fn feature_width(&self) -> usize {
        self.params.get("head.w").map(|w| w.rows()).unwrap_or(0)
    }

    /// Graph stack over node features `x`; returns the final node features.
    fn stack(&self, tape: &mut Tape, ps: &ParamSet, x: Var, s: &AffinityStack) -> GnnResult<Var> {
        if self.gnn.arch.uses_graph() && s.depth() != self.depth {
            return Err(GnnError::InvalidConfig(format!(
                "model expects {} affinity slices, got {}",
                self.depth,
                s.depth()
            )));
        }
        let mut h = x;
        match self.gnn.arch {
            Arch::Magat => {
                let set = MagatSettings {
                    mode: self.gnn.mode,
                    residual: self.gnn.residual,
                    tol: self.gnn.tol,
                    max_iter: self.gnn.max_iter,
                };
                let mut sv: Vec<Var> = s.slices().iter().map(|m| tape.constant(m.clone())).collect();
                for l in 0..self.gnn.layers {
                    let (out, alphas) = layers::magat_forward(tape, ps, &format!("gnn.l{l}"), h, &sv, set)
                        .map_err(|e| match e {
                            GnnError::Graph(source) => GnnError::Layer { layer: l, source },
                            e => e,
                        })?;
                    h = out;
                    sv = alphas;
                }
            }
            Arch::Gcn => {
                let a_hat = super::renormalize(&adjacency_mean(s))?;
                for l in 0..self.gnn.layers {
                    h = layers::gcn_forward(tape, ps, &format!("gnn.l{l}.W"), h, &a_hat)?;
                }
            }
            Arch::Gat => {
                let adj = binary_adjacency(s);
                for l in 0..self.gnn.layers {
                    h = layers::gat_forward(tape, ps, &format!("gnn.l{l}"), h, &adj)?;
                }
            }
            Arch::FusionGcn => {
                let a_hats = s.slices().iter().map(super::renormalize).collect::<GnnResult<Vec<_>>>()?;
                for l in 0..self.gnn.layers {
                    h = layers::fusion_forward(tape, ps, &format!("gnn.l{l}"), h, &a_hats)?;
                }
            }
            Arch::NodeOnly => {
                for l in 0..self.gnn.layers {
                    let w = tape.param(ps, &format!("gnn.l{l}.W"))?;
                    let z = tape.matmul(h, w)?;
                    h = tape.elu(z);
                }
            }
        }
        Ok(h)
    }

    /// Pivot readout: optional dropout mask, linear map, sigmoid (`1×1`).
    fn head(&self, tape: &mut Tape, ps: &ParamSet, h: Var, mask: Option<DenseArray>) -> GnnResult<Var> {
        let mut row = tape.gather_rows(h, &[0])?;
        if let Some(m) = mask {
            row = tape.mul_const(row, m)?;
        }
        let w = tape.param(ps, "head.w")?;
        let b = tape.param(ps, "head.b")?;
        let z = tape.matmul(row, w)?;
        let z = tape.add(z, b)?;
        Ok(tape.activation(z, Activation::Sigmoid))
    }

    /// Node lists of `samples` as unique pool indices plus, per sample, the
    /// row of each node in that list. Node-only models use the pivot alone.
    fn unique_nodes(&self, samples: &[&GraphSample]) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut order = Vec::new();
        let mut pos = HashMap::new();
        let rows = samples
            .iter()
            .map(|s| {
                let nodes = if self.gnn.arch.uses_graph() { &s.nodes[..] } else { &s.nodes[..1] };
                nodes
                    .iter()
                    .map(|&i| {
                        *pos.entry(i).or_insert_with(|| {
                            order.push(i);
                            order.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();
        (order, rows)
    }

    fn encoder_pass<'a>(&'a self, mode: Mode, state: &'a mut NormState) -> EncoderPass<'a> {
        EncoderPass {
            config: &self.encoder,
            prefix: ENC,
            mode,
            state,
        }
    }

    fn loss_with_state(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        state: &mut NormState,
        pool: &[PatchTensor],
        samples: &[&GraphSample],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> GnnResult<Var> {
        if samples.is_empty() {
            return Err(GnnError::InvalidConfig("empty batch".into()));
        }
        let (unique, rows) = self.unique_nodes(samples);
        let patches: Vec<&PatchTensor> = unique.iter().map(|&i| &pool[i]).collect();
        let months: Vec<u8> = patches.iter().map(|p| p.month()).collect();
        let x = prepare_batch(&patches, self.encoder.bands.bands(), &self.input)?;
        let xv = tape.constant(x);
        let mut pass = EncoderPass {
            config: &self.encoder,
            prefix: ENC,
            mode: Mode::Train,
            state,
        };
        let z = pass.encode(tape, params, xv, &months)?;
        let mut probs = Vec::with_capacity(samples.len());
        for (s, r) in samples.iter().zip(&rows) {
            let xg = tape.gather_rows(z, r)?;
            let h = self.stack(tape, params, xg, &s.affinities)?;
            let mask = match rng.as_deref_mut() {
                Some(rng) if self.gnn.dropout > 0.0 => {
                    Some(dropout_mask(&[1, tape.value(h).cols()], self.gnn.dropout, rng)?)
                }
                _ => None,
            };
            probs.push(self.head(tape, params, h, mask)?);
        }
        let p = tape.concat_cols(&probs)?;
        let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
        Ok(tape.bce(p, &labels)?)
    }

    /// Train-mode batch loss under `params`, without dropout and without
    /// touching the running statistics. Deterministic, for gradient checks.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        pool: &[PatchTensor],
        samples: &[&GraphSample],
    ) -> GnnResult<Var> {
        let mut state = self.norm.clone();
        self.loss_with_state(tape, params, &mut state, pool, samples, None)
    }

    /// One SGD step on a batch; returns the mean BCE before the update.
    pub fn train_batch(
        &mut self,
        pool: &[PatchTensor],
        samples: &[&GraphSample],
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> GnnResult<f64> {
        let mut tape = Tape::new();
        let mut state = std::mem::take(&mut self.norm);
        let loss = self.loss_with_state(&mut tape, &self.params, &mut state, pool, samples, Some(rng));
        self.norm = state;
        let loss = loss?;
        let lv = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        tape.accumulate_param_grads(&grads, &mut self.params)?;
        sgd_step(&mut self.params, lr)?;
        Ok(lv)
    }

    /// Eval-mode encoder features for the given pool entries (`n×F⁰`).
    pub fn encode_pool(&self, pool: &[PatchTensor], indices: &[usize]) -> GnnResult<DenseArray> {
        let mut rows = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_CHUNK) {
            let patches: Vec<&PatchTensor> = chunk.iter().map(|&i| &pool[i]).collect();
            let months: Vec<u8> = patches.iter().map(|p| p.month()).collect();
            let x = prepare_batch(&patches, self.encoder.bands.bands(), &self.input)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut state = self.norm.clone();
            let z = self.encoder_pass(Mode::Eval, &mut state).encode(&mut tape, &self.params, xv, &months)?;
            let z = tape.value(z);
            rows.extend((0..z.rows()).map(|i| z.row(i).to_vec()));
        }
        Ok(DenseArray::from_rows(&rows)?)
    }

    /// Final-layer node features of one graph from precomputed node
    /// features (`N×F⁰`, pivot first).
    pub fn node_embeddings(&self, x: &DenseArray, s: &AffinityStack) -> GnnResult<DenseArray> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let h = self.stack(&mut tape, &self.params, xv, s)?;
        Ok(tape.value(h).clone())
    }

    /// Eval-mode pivot probability from precomputed node features.
    pub fn predict_graph(&self, x: &DenseArray, s: &AffinityStack) -> GnnResult<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let h = self.stack(&mut tape, &self.params, xv, s)?;
        let p = self.head(&mut tape, &self.params, h, None)?;
        Ok(tape.value(p).data()[0])
    }

    fn sample_features(&self, table: &DenseArray, pos: &HashMap<usize, usize>, s: &GraphSample) -> GnnResult<DenseArray> {
        let nodes = if self.gnn.arch.uses_graph() { &s.nodes[..] } else { &s.nodes[..1] };
        let rows: Vec<Vec<f64>> = nodes.iter().map(|i| table.row(pos[i]).to_vec()).collect();
        Ok(DenseArray::from_rows(&rows)?)
    }

    fn encode_samples(&self, pool: &[PatchTensor], samples: &[GraphSample]) -> GnnResult<(DenseArray, HashMap<usize, usize>)> {
        let refs: Vec<&GraphSample> = samples.iter().collect();
        let (unique, _) = self.unique_nodes(&refs);
        let table = self.encode_pool(pool, &unique)?;
        let pos = unique.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        Ok((table, pos))
    }

    /// Eval-mode probabilities for every sample.
    pub fn predict(&self, pool: &[PatchTensor], samples: &[GraphSample]) -> GnnResult<Vec<f64>> {
        let (table, pos) = self.encode_samples(pool, samples)?;
        samples
            .iter()
            .map(|s| self.predict_graph(&self.sample_features(&table, &pos, s)?, &s.affinities))
            .collect()
    }

    /// Final-layer pivot features for every sample.
    pub fn pivot_features(&self, pool: &[PatchTensor], samples: &[GraphSample]) -> GnnResult<Vec<Vec<f64>>> {
        let (table, pos) = self.encode_samples(pool, samples)?;
        samples
            .iter()
            .map(|s| {
                let h = self.node_embeddings(&self.sample_features(&table, &pos, s)?, &s.affinities)?;
                Ok(h.row(0).to_vec())
            })
            .collect()
    }

    pub fn describe(&self) -> BTreeMap<String, String> {
        let mut m = self.encoder.describe();
        m.insert("arch".into(), self.gnn.arch.to_string());
        m.insert("L".into(), self.gnn.layers.to_string());
        m.insert("G".into(), self.depth.to_string());
        m.insert("F_int".into(), self.gnn.f_int.to_string());
        m.insert("mode".into(), self.gnn.mode.to_string());
        m.insert("residual".into(), self.gnn.residual.to_string());
        m.insert("dropout".into(), self.gnn.dropout.to_string());
        m
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = self.params.to_map();
        entries.extend(self.norm.to_entries());
        entries.extend(self.input.to_entries());
        let mut ck = Checkpoint::new(entries);
        ck.manifest = self.describe();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> GnnResult<Self> {
        let m = &ck.manifest;
        let get = |k: &str| m.get(k).ok_or_else(|| GnnError::InvalidConfig(format!("manifest lacks `{k}`")));
        let num = |k: &str| -> GnnResult<usize> {
            get(k)?.parse().map_err(|_| GnnError::InvalidConfig(format!("bad `{k}`")))
        };
        let encoder = ExtractorConfig::from_description(m)?;
        let gnn = GnnConfig {
            arch: Arch::parse(get("arch")?).ok_or_else(|| GnnError::InvalidConfig("bad `arch`".into()))?,
            layers: num("L")?,
            f_int: num("F_int")?,
            mode: AttnNorm::parse(get("mode")?).ok_or_else(|| GnnError::InvalidConfig("bad `mode`".into()))?,
            residual: get("residual")? == "true",
            dropout: get("dropout")?
                .parse()
                .map_err(|_| GnnError::InvalidConfig("bad `dropout`".into()))?,
            ..GnnConfig::default()
        };
        let mut model = Self::new(encoder, gnn, num("G")?, 0)?;
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in names {
            let v = ck
                .entries
                .get(&name)
                .ok_or_else(|| GnnError::InvalidConfig(format!("checkpoint lacks `{name}`")))?;
            model.params.set(&name, v.clone())?;
        }
        model.norm.load_entries(&ck.entries);
        model.input = BandStats::from_entries(&ck.entries).unwrap_or_default();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> GnnResult<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> GnnResult<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
