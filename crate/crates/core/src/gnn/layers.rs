//! Graph layers on the tape. Weight matrices are stored input×output so a
//! layer computes `X·W`.

use crate::graphbuild::{check_support, max_row_deviation, GraphError};
use crate::numcore::{Activation, DenseArray, ParamSet, Tape, Var};

use super::{AttnNorm, GnnError, GnnResult};

/// One-hot selectors of the guard offset, over the entries where `support`
/// is positive: `rows` picks each row's maximum of `l`; `cols` (sinkhorn
/// mode) picks each column's maximum of the row-shifted values. Empty rows
/// or columns select nothing and get offset 0.
fn max_selectors(l: &DenseArray, support: &DenseArray, mode: AttnNorm) -> (DenseArray, Option<DenseArray>) {
    let (n, m) = (l.rows(), l.cols());
    let on = |i: usize, j: usize| support.at(i, j) > 0.0;
    let argmax = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        it.fold(None, |best: Option<(usize, f64)>, (k, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((k, v)),
        })
    };
    let mut rows = DenseArray::zeros(&[n, m]);
    let mut row_max = vec![0.0; n];
    for i in 0..n {
        if let Some((j, v)) = argmax(&mut (0..m).filter(|&j| on(i, j)).map(|j| (j, l.at(i, j)))) {
            rows.set(i, j, 1.0);
            row_max[i] = v;
        }
    }
    let cols = (mode == AttnNorm::Sinkhorn).then(|| {
        let mut c = DenseArray::zeros(&[n, m]);
        for j in 0..m {
            if let Some((i, _)) = argmax(&mut (0..n).filter(|&i| on(i, j)).map(|i| (i, l.at(i, j) - row_max[i]))) {
                c.set(i, j, 1.0);
            }
        }
        c
    });
    (rows, cols)
}

/// `exp(l − r_i − c_j)` on supported entries and 1 elsewhere, where `r`
/// and `c` are the row and column maxima of [`max_selectors`]. The offsets
/// are diagonal scalings, which the row softmax and the Sinkhorn limit are
/// invariant to; they stay on the tape so the unrolled iterations are
/// differentiated exactly.
fn guarded_exp(tape: &mut Tape, l: Var, support: &DenseArray, mode: AttnNorm) -> GnnResult<Var> {
    let (n, m) = (tape.value(l).rows(), tape.value(l).cols());
    let (rsel, csel) = max_selectors(tape.value(l), support, mode);
    let ones_m = tape.constant(DenseArray::full(&[m, 1], 1.0));
    let picked = tape.mul_const(l, rsel)?;
    let r = tape.matmul(picked, ones_m)?;
    let c = match csel {
        Some(csel) => {
            let ones_n = tape.constant(DenseArray::full(&[n, 1], 1.0));
            let picked = tape.mul_const(l, csel.clone())?;
            let picked = tape.transpose(picked);
            let at = tape.matmul(picked, ones_n)?;
            let sel_t = tape.constant(csel.transpose());
            let shift = tape.matmul(sel_t, r)?;
            tape.sub(at, shift)?
        }
        None => tape.constant(DenseArray::zeros(&[m, 1])),
    };
    let off = tape.outer_sum(r, c)?;
    let z = tape.sub(l, off)?;
    let z = tape.mul_const(z, support.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?;
    Ok(tape.exp(z))
}

/// Raw pre-activation scores `e_ij = p_topᵀ h_i + p_botᵀ h_j` where
/// `h = X·V` and `p = [p_top; p_bot]`.
fn pair_scores(tape: &mut Tape, h: Var, p: Var) -> GnnResult<Var> {
    let f = tape.value(h).cols();
    if tape.value(p).shape() != [2 * f, 1] {
        return Err(GnnError::InvalidConfig(format!(
            "attention vector must be {}×1, got {:?}",
            2 * f,
            tape.value(p).shape()
        )));
    }
    let top = tape.slice_rows(p, 0, f)?;
    let bot = tape.slice_rows(p, f, f)?;
    let a = tape.matmul(h, top)?;
    let b = tape.matmul(h, bot)?;
    Ok(tape.outer_sum(a, b)?)
}

/// Attention weights `exp(LReLU(e) − max)`, guarded by [`guarded_exp`].
pub(crate) fn guarded_scores(
    tape: &mut Tape,
    h: Var,
    p: Var,
    mode: AttnNorm,
    support: &DenseArray,
) -> GnnResult<Var> {
    let e = pair_scores(tape, h, p)?;
    let l = tape.activation(e, Activation::LeakyRelu);
    guarded_exp(tape, l, support, mode)
}

/// Sinkhorn–Knopp on the tape: unrolled row/column normalisations with the
/// same stopping rule as [`crate::graphbuild::sinkhorn_normalize`].
pub(crate) fn sinkhorn_tape(tape: &mut Tape, a: Var, tol: f64, max_iter: usize) -> GnnResult<Var> {
    check_support(tape.value(a))?;
    let mut cur = a;
    let mut deviation = f64::INFINITY;
    for _ in 0..max_iter {
        cur = tape.row_normalize(cur)?;
        cur = tape.col_normalize(cur)?;
        deviation = max_row_deviation(tape.value(cur));
        if deviation < tol {
            return Ok(cur);
        }
    }
    Err(GraphError::NotConverged {
        iterations: max_iter,
        deviation,
    }
    .into())
}

/// Settings of one MAGAT layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagatSettings {
    pub mode: AttnNorm,
    pub residual: bool,
    pub tol: f64,
    pub max_iter: usize,
}

/// One MAGAT layer. Parameters under `prefix`: `h{g}.V` (F_in×F_int),
/// `h{g}.p` (2F_int×1), `h{g}.W` (F_in×F_int) per head and `U`
/// (F_in×G·F_int) for the residual path.
///
/// Returns the new node features and the normalised attention stack.
pub(crate) fn magat_forward(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    x: Var,
    s: &[Var],
    set: MagatSettings,
) -> GnnResult<(Var, Vec<Var>)> {
    let mut heads = Vec::with_capacity(s.len());
    let mut alphas = Vec::with_capacity(s.len());
    for (g, &sg) in s.iter().enumerate() {
        let v = tape.param(params, &format!("{prefix}.h{g}.V"))?;
        let p = tape.param(params, &format!("{prefix}.h{g}.p"))?;
        let w = tape.param(params, &format!("{prefix}.h{g}.W"))?;
        let h = tape.matmul(x, v)?;
        let support = tape.value(sg).clone();
        let scores = guarded_scores(tape, h, p, set.mode, &support)?;
        let hat = tape.mul(sg, scores)?;
        let alpha = match set.mode {
            AttnNorm::Sinkhorn => sinkhorn_tape(tape, hat, set.tol, set.max_iter)?,
            AttnNorm::RowSoftmax => tape
                .row_normalize(hat)
                .map_err(|_| GnnError::EmptyNeighbourhood)?,
        };
        let xw = tape.matmul(x, w)?;
        heads.push(tape.matmul(alpha, xw)?);
        alphas.push(alpha);
    }
    let cat = tape.concat_cols(&heads)?;
    let mut out = tape.elu(cat);
    if set.residual {
        let u = tape.param(params, &format!("{prefix}.U"))?;
        let r = tape.matmul(x, u)?;
        out = tape.add(out, r)?;
    }
    Ok((out, alphas))
}

/// GAT layer: parameters `W` (F_in×F_out) and `a` (2F_out×1). `adj` is a
/// binary adjacency with self-loops.
pub(crate) fn gat_forward(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    x: Var,
    adj: &DenseArray,
) -> GnnResult<Var> {
    let w = tape.param(params, &format!("{prefix}.W"))?;
    let a = tape.param(params, &format!("{prefix}.a"))?;
    let h = tape.matmul(x, w)?;
    let scores = guarded_scores(tape, h, a, AttnNorm::RowSoftmax, adj)?;
    let masked = tape.mul_const(scores, adj.clone())?;
    let alpha = tape
        .row_normalize(masked)
        .map_err(|_| GnnError::EmptyNeighbourhood)?;
    let agg = tape.matmul(alpha, h)?;
    Ok(tape.elu(agg))
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
pub fn renormalize(a: &DenseArray) -> GnnResult<DenseArray> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(GnnError::InvalidConfig("adjacency must be square".into()));
    }
    if a.data().iter().any(|v| !(*v >= 0.0)) {
        return Err(GnnError::InvalidConfig("adjacency must be non-negative".into()));
    }
    let n = a.rows();
    let mut t = a.clone();
    for i in 0..n {
        t.set(i, i, t.at(i, i) + 1.0);
    }
    let d: Vec<f64> = (0..n).map(|i| t.row(i).iter().sum::<f64>()).collect();
    // with the added identity every degree is at least 1
    assert!(d.iter().all(|&v| v >= 1.0), "augmented degree below 1");
    let inv: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            t.set(i, j, inv[i] * t.at(i, j) * inv[j]);
        }
    }
    Ok(t)
}

/// GCN layer `ELU(Â X W)` with `Â` already renormalised.
pub(crate) fn gcn_forward(
    tape: &mut Tape,
    params: &ParamSet,
    weight: &str,
    x: Var,
    a_hat: &DenseArray,
) -> GnnResult<Var> {
    let w = tape.param(params, weight)?;
    let a = tape.constant(a_hat.clone());
    let ax = tape.matmul(a, x)?;
    let axw = tape.matmul(ax, w)?;
    Ok(tape.elu(axw))
}

/// Fusion-GCN layer: one GCN per slice (`g{g}.W`), combined with
/// `softmax(beta)`.
pub(crate) fn fusion_forward(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    x: Var,
    a_hats: &[DenseArray],
) -> GnnResult<Var> {
    let parts = a_hats
        .iter()
        .enumerate()
        .map(|(g, a)| gcn_forward(tape, params, &format!("{prefix}.g{g}.W"), x, a))
        .collect::<GnnResult<Vec<_>>>()?;
    let beta = tape.param(params, &format!("{prefix}.beta"))?;
    let e = tape.exp(beta);
    let weights = tape.row_normalize(e)?;
    Ok(tape.weighted_sum(&parts, weights)?)
}
