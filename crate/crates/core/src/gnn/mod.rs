//! Graph layers over pivot-centred neighbourhoods: the multi-adjacency
//! attention layer, GCN / GAT / Fusion-GCN baselines, pivot readout and the
//! two-branch ensemble.
//!
//! Projection matrices are stored input×output (`F_in×F_out`) and applied
//! as `X·W`.

mod layers;
pub mod model;

use std::fmt;

use thiserror::Error;

use crate::extractor::ExtractError;
use crate::graphbuild::{AffinityStack, GraphError, SINKHORN_TOL};
use crate::numcore::ops::dropout_mask;
use crate::numcore::{DenseArray, Mode, NumError, ParamSet, Tape};

pub use layers::{renormalize, MagatSettings};
pub use model::{Arch, GnnConfig, GraphModel, GraphSample};

/// Sinkhorn iteration cap inside attention layers. Learned attention can
/// be far sharper than the input affinities and converge slowly.
pub const ATTENTION_MAX_ITER: usize = 1000;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("layer {layer}: {source}")]
    Layer { layer: usize, source: GraphError },
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error("a node has no neighbours to attend to")]
    EmptyNeighbourhood,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type GnnResult<T> = Result<T, GnnError>;

/// How attenuated attention scores are normalised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttnNorm {
    /// Doubly stochastic via Sinkhorn–Knopp.
    Sinkhorn,
    /// Each row sums to one.
    RowSoftmax,
}

impl AttnNorm {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sinkhorn" => Some(Self::Sinkhorn),
            "row_softmax" | "softmax" => Some(Self::RowSoftmax),
            _ => None,
        }
    }
}

impl fmt::Display for AttnNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sinkhorn => "sinkhorn",
            Self::RowSoftmax => "row_softmax",
        })
    }
}

/// Weights of one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `F_in×F_int` score projection.
    pub v: DenseArray,
    /// `2F_int×1` attention vector.
    pub p: DenseArray,
    /// `F_in×F_int` value projection.
    pub w: DenseArray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagatLayerParams {
    pub heads: Vec<HeadParams>,
    /// `F_in×G·F_int` residual projection; `None` disables the residual.
    pub u: Option<DenseArray>,
}

impl MagatLayerParams {
    pub fn validate(&self) -> GnnResult<()> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| GnnError::InvalidConfig("no attention heads".into()))?;
        let (f_in, f_int) = (first.v.rows(), first.v.cols());
        for h in &self.heads {
            if h.v.shape() != [f_in, f_int] || h.w.shape() != [f_in, f_int] || h.p.shape() != [2 * f_int, 1] {
                return Err(GnnError::InvalidConfig("heads must share dimensions".into()));
            }
        }
        if let Some(u) = &self.u {
            if u.shape() != [f_in, self.heads.len() * f_int] {
                return Err(GnnError::InvalidConfig(format!(
                    "residual projection must be {f_in}×{}, got {:?}",
                    self.heads.len() * f_int,
                    u.shape()
                )));
            }
        }
        Ok(())
    }

    fn to_params(&self) -> GnnResult<ParamSet> {
        let mut ps = ParamSet::new();
        for (g, h) in self.heads.iter().enumerate() {
            ps.insert(format!("l.h{g}.V"), h.v.clone())?;
            ps.insert(format!("l.h{g}.p"), h.p.clone())?;
            ps.insert(format!("l.h{g}.W"), h.w.clone())?;
        }
        if let Some(u) = &self.u {
            ps.insert("l.U", u.clone())?;
        }
        Ok(ps)
    }
}

fn check_finite(x: &DenseArray, what: &'static str) -> GnnResult<()> {
    Ok(x.ensure_finite(what)?)
}

/// Unnormalised pairwise scores `exp(LReLU(pᵀ[h_i ∥ h_j]))` with `h = X·V`.
pub fn attention_scores(x: &DenseArray, v: &DenseArray, p: &DenseArray) -> GnnResult<DenseArray> {
    check_finite(x, "attention input")?;
    let h = x.matmul(v)?;
    let f = h.cols();
    if p.shape() != [2 * f, 1] {
        return Err(GnnError::InvalidConfig(format!("attention vector must be {}×1", 2 * f)));
    }
    let n = h.rows();
    let a: Vec<f64> = (0..n).map(|i| (0..f).map(|k| h.at(i, k) * p.data()[k]).sum()).collect();
    let b: Vec<f64> = (0..n).map(|j| (0..f).map(|k| h.at(j, k) * p.data()[f + k]).sum()).collect();
    let mut out = DenseArray::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, crate::numcore::ops::leaky_relu(a[i] + b[j]).exp());
        }
    }
    Ok(out)
}

/// Elementwise attenuation of scores by an affinity slice.
pub fn attenuate(scores: &DenseArray, s: &DenseArray) -> GnnResult<DenseArray> {
    Ok(scores.zip_map(s, |a, b| a * b)?)
}

/// One attention layer outside of training: returns the new node features
/// and the normalised attention stack handed to the next layer.
pub fn magat_layer(
    x: &DenseArray,
    s: &AffinityStack,
    params: &MagatLayerParams,
    mode: AttnNorm,
) -> GnnResult<(DenseArray, AffinityStack)> {
    params.validate()?;
    if params.heads.len() != s.depth() {
        return Err(GnnError::InvalidConfig(format!(
            "{} heads for {} affinity slices",
            params.heads.len(),
            s.depth()
        )));
    }
    check_finite(x, "layer input")?;
    let ps = params.to_params()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let sv: Vec<_> = s.slices().iter().map(|m| tape.constant(m.clone())).collect();
    let settings = MagatSettings {
        mode,
        residual: params.u.is_some(),
        tol: SINKHORN_TOL,
        max_iter: ATTENTION_MAX_ITER,
    };
    let (out, alphas) = layers::magat_forward(&mut tape, &ps, "l", xv, &sv, settings).map_err(|e| match e {
        GnnError::Graph(source) => GnnError::Layer { layer: 0, source },
        e => e,
    })?;
    let next = AffinityStack::new(alphas.iter().map(|&a| tape.value(a).clone()).collect(), mode == AttnNorm::Sinkhorn)?;
    Ok((tape.value(out).clone(), next))
}

/// `ELU(Â X W)` with `Â` the renormalised adjacency of `a`.
pub fn gcn_layer(x: &DenseArray, a: &DenseArray, w: &DenseArray) -> GnnResult<DenseArray> {
    let a_hat = renormalize(a)?;
    let mut ps = ParamSet::new();
    ps.insert("W", w.clone())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = layers::gcn_forward(&mut tape, &ps, "W", xv, &a_hat)?;
    Ok(tape.value(out).clone())
}

/// Masked-softmax attention over a binary adjacency (`w`: `F_in×F_out`,
/// `a`: `2F_out×1`).
pub fn gat_layer(x: &DenseArray, adj: &DenseArray, w: &DenseArray, a: &DenseArray) -> GnnResult<DenseArray> {
    if adj.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(GnnError::InvalidConfig("adjacency must be binary".into()));
    }
    let mut ps = ParamSet::new();
    ps.insert("g.W", w.clone())?;
    ps.insert("g.a", a.clone())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = layers::gat_forward(&mut tape, &ps, "g", xv, adj)?;
    Ok(tape.value(out).clone())
}

/// `Σ_g softmax(β)_g · GCN_g(X)` with one weight matrix per slice.
pub fn fusion_gcn_layer(
    x: &DenseArray,
    s: &AffinityStack,
    weights: &[DenseArray],
    beta: &[f64],
) -> GnnResult<DenseArray> {
    if weights.len() != s.depth() || beta.len() != s.depth() {
        return Err(GnnError::InvalidConfig("one weight matrix and β per slice".into()));
    }
    let a_hats = s.slices().iter().map(renormalize).collect::<GnnResult<Vec<_>>>()?;
    let mut ps = ParamSet::new();
    for (g, w) in weights.iter().enumerate() {
        ps.insert(format!("f.g{g}.W"), w.clone())?;
    }
    ps.insert("f.beta", DenseArray::new(vec![1, beta.len()], beta.to_vec())?)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = layers::fusion_forward(&mut tape, &ps, "f", xv, &a_hats)?;
    Ok(tape.value(out).clone())
}

/// Linear map `F→1` followed by a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    /// `F×1`.
    pub w: DenseArray,
    pub b: f64,
}

/// Probability for the pivot row. Dropout is applied to that row in train
/// mode only, with its mask drawn from `seed`.
pub fn classify_pivot(
    x: &DenseArray,
    pivot: usize,
    head: &ClassifierHead,
    dropout: f64,
    mode: Mode,
    seed: u64,
) -> GnnResult<f64> {
    if pivot >= x.rows() {
        return Err(GnnError::InvalidConfig(format!("pivot {pivot} outside {} nodes", x.rows())));
    }
    let mut row = x.row(pivot).to_vec();
    if mode == Mode::Train && dropout > 0.0 {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mask = dropout_mask(&[row.len()], dropout, &mut rng)?;
        row.iter_mut().zip(mask.data()).for_each(|(v, m)| *v *= m);
    }
    if head.w.len() != row.len() {
        return Err(GnnError::InvalidConfig("head width does not match features".into()));
    }
    let z: f64 = row.iter().zip(head.w.data()).map(|(a, b)| a * b).sum::<f64>() + head.b;
    Ok(crate::numcore::ops::sigmoid(z))
}

/// Mean of the two branch probabilities.
pub fn ensemble_predict(p_rgb: f64, p_spectral: f64) -> f64 {
    0.5 * (p_rgb + p_spectral)
}
