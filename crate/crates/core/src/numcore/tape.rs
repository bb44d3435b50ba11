//! Reverse-mode differentiation over the fixed layer set the models need.
//!
//! A [`Tape`] records every operation together with its forward value. Leaves
//! are either constants (no gradient), free variables, or named parameters;
//! [`Tape::backward`] walks the record in reverse and produces gradients for
//! every node that depends on a non-constant leaf.

use super::array::{gemm, DenseArray};
use super::conv::{col2im, im2col, ConvGeometry};
use super::error::{NumError, NumResult};
use super::ops::{elu, leaky_relu, sigmoid, Activation, LEAKY_SLOPE, PROB_CLAMP};
use super::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Statistics source for [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum BnStats {
    Batch,
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulConst(Var, DenseArray),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Act(Var, Activation),
    Exp(Var),
    RowNormalize(Var),
    ColNormalize(Var),
    OuterSum(Var, Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        out_channels: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        in_channels: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rows: Vec<usize>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    Bce(Var, Vec<f64>),
    Mse(Var, DenseArray),
    WeightedSum(Vec<Var>, Var),
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`]; only leaves keep theirs.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> NumError {
    NumError::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

/// Channel-major view of a batch: (batch, channels, spatial size).
fn bn_dims(shape: &[usize]) -> NumResult<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(shape_err("batch_norm", &[0, 0, 0, 0], shape)),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: DenseArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter; its gradient is routed back by
    /// [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, params: &ParamSet, name: &str) -> NumResult<Var> {
        let value = params.get(name)?.clone();
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Adds a constant array; gradients pass through to `a` only.
    pub fn shift(&mut self, a: Var, offset: &DenseArray) -> NumResult<Var> {
        let value = self.value(a).zip_map(offset, |x, y| x + y)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Shift(a), rg))
    }

    pub fn mul_const(&mut self, a: Var, factor: DenseArray) -> NumResult<Var> {
        let value = self.value(a).zip_map(&factor, |x, y| x * y)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MulConst(a, factor), rg))
    }

    /// `x[r, c] + bias[c]` for a rank-2 `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> NumResult<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let bv = self.value(bias);
        if bv.len() != c {
            return Err(shape_err("add_row_bias", &[c], bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    /// `x[b, c, h, w] + bias[c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> NumResult<Var> {
        let xv = self.value(x);
        let (_, c, hw) = bn_dims(xv.shape())?;
        let bv = self.value(bias);
        if bv.len() != c {
            return Err(shape_err("add_channel_bias", &[c], bv.shape()));
        }
        let mut out = xv.clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let b = bv.data()[i % c];
            plane.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddChannelBias(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let f = match kind {
            Activation::Elu => elu,
            Activation::LeakyRelu => leaky_relu,
            Activation::Sigmoid => sigmoid,
        };
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, Op::Act(a, kind), rg)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Elu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    /// Divides every row by its sum. Rows summing to zero are rejected.
    pub fn row_normalize(&mut self, a: Var) -> NumResult<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = av.clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let s: f64 = row.iter().sum();
            if s <= 0.0 || !s.is_finite() {
                return Err(NumError::InvalidArgument(format!(
                    "row {i} has non-positive sum {s}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::RowNormalize(a), rg))
    }

    /// Divides every column by its sum. Columns summing to zero are rejected.
    pub fn col_normalize(&mut self, a: Var) -> NumResult<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut sums = vec![0.0; c];
        for i in 0..r {
            for (s, v) in sums.iter_mut().zip(av.row(i)) {
                *s += v;
            }
        }
        if let Some(j) = sums.iter().position(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(NumError::InvalidArgument(format!(
                "column {j} has non-positive sum {}",
                sums[j]
            )));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, s) in row.iter_mut().zip(&sums) {
                *v /= s;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::ColNormalize(a), rg))
    }

    /// `out[i][j] = a[i] + b[j]` for column vectors `a` (n×1) and `b` (m×1).
    pub fn outer_sum(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, m) = (av.len(), bv.len());
        let mut data = Vec::with_capacity(n * m);
        for &x in av.data() {
            data.extend(bv.data().iter().map(|&y| x + y));
        }
        let value = DenseArray::new(vec![n, m], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::OuterSum(a, b), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> NumResult<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                if pv.rows() != rows {
                    return Err(shape_err("concat_cols", &[rows], pv.shape()));
                }
                data.extend_from_slice(pv.row(i));
            }
        }
        let value = DenseArray::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects rows of a rank-2 array (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> NumResult<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= av.rows() {
                return Err(NumError::InvalidArgument(format!("row {i} out of range")));
            }
            data.extend_from_slice(av.row(i));
        }
        let value = DenseArray::new(vec![indices.len(), c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Contiguous row range `start..start+len` of a rank-2 array.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> NumResult<Var> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(NumError::InvalidArgument("row slice out of range".into()));
        }
        let c = av.cols();
        let value =
            DenseArray::new(vec![len, c], av.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> NumResult<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Convolution of a `B×C×H×W` batch with `O×C×k×k` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> NumResult<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", &ws, &xs));
        }
        let geom = ConvGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(shape_err("conv2d", &ws, &xs));
        }
        let (b, o) = (xs[0], ws[0]);
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let (ckk, p) = (geom.col_rows(), geom.col_cols());
        let img = xs[1] * xs[2] * xs[3];
        let mut out = vec![0.0; b * o * p];
        let mut cols = vec![0.0; ckk * p];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for i in 0..b {
            im2col(&xv[i * img..(i + 1) * img], &geom, &mut cols);
            gemm(o, ckk, p, wv, false, &cols, false, &mut out[i * o * p..(i + 1) * o * p], 0.0);
        }
        let value = DenseArray::new(vec![b, o, oh, ow], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                geom,
                out_channels: o,
            },
            rg,
        ))
    }

    /// Transposed convolution of a `B×Cin×h×w` batch with `Cin×Cout×k×k`
    /// weights; output side is `(h-1)·stride + k − 2·pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    ) -> NumResult<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != ws[3] {
            return Err(shape_err("conv_transpose2d", &ws, &xs));
        }
        let k = ws[2];
        if (xs[2] - 1) * stride + k < 2 * pad + 1 {
            return Err(shape_err("conv_transpose2d", &ws, &xs));
        }
        let oh = (xs[2] - 1) * stride + k - 2 * pad;
        let ow = (xs[3] - 1) * stride + k - 2 * pad;
        let geom = ConvGeometry {
            channels: ws[1],
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_height(), xs[2]);
        let (b, cin) = (xs[0], xs[1]);
        let (ckk, p) = (geom.col_rows(), xs[2] * xs[3]);
        let img = ws[1] * oh * ow;
        let mut out = vec![0.0; b * img];
        let mut cols = vec![0.0; ckk * p];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for i in 0..b {
            gemm(ckk, cin, p, wv, true, &xv[i * cin * p..(i + 1) * cin * p], false, &mut cols, 0.0);
            col2im(&cols, &geom, &mut out[i * img..(i + 1) * img]);
        }
        let value = DenseArray::new(vec![b, ws[1], oh, ow], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                geom,
                in_channels: cin,
            },
            rg,
        ))
    }

    /// Batch normalisation with per-sample affine rows.
    ///
    /// `gamma`/`beta` are `R×C`; sample `b` uses row `rows[b]`. With
    /// [`BnStats::Batch`] the returned tuple carries the biased batch mean,
    /// variance and element count per channel for running-statistic updates.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        rows: &[usize],
        eps: f64,
        stats: BnStats,
    ) -> NumResult<(Var, Option<(Vec<f64>, Vec<f64>, usize)>)> {
        let xv = self.value(x);
        let (b, c, hw) = bn_dims(xv.shape())?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.rank() != 2 || gv.cols() != c || bv.shape() != gv.shape() {
            return Err(shape_err("batch_norm", &[0, c], gv.shape()));
        }
        if rows.len() != b || rows.iter().any(|&r| r >= gv.rows()) {
            return Err(NumError::InvalidArgument(
                "batch_norm: affine row index out of range".into(),
            ));
        }
        let count = b * hw;
        let (mean, var, batch_stats) = match stats {
            BnStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..b {
                    for ch in 0..c {
                        let plane = &xv.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                        mean[ch] += plane.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for i in 0..b {
                    for ch in 0..c {
                        let plane = &xv.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                        var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var, true)
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", &[c], &[mean.len()]));
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..b {
            let r = rows[i];
            for ch in 0..c {
                let (g, be) = (gv.at(r, ch), bv.at(r, ch));
                let off = (i * c + ch) * hw;
                for k in off..off + hw {
                    let n = (xv.data()[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = n;
                    out[k] = g * n + be;
                }
            }
        }
        let value = DenseArray::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                rows: rows.to_vec(),
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some((mean, var, count))))
    }

    /// `B×C×H×W → B×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> NumResult<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", &[0, 0, 0, 0], s));
        }
        let hw = s[2] * s[3];
        let data = xv
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = DenseArray::new(vec![s[0], s[1]], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = DenseArray::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = DenseArray::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against `targets`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> NumResult<Var> {
        let pv = self.value(p);
        let loss = super::ops::bce_loss(pv.data(), targets)?;
        let rg = self.rg(&[p]);
        Ok(self.push(DenseArray::scalar(loss), Op::Bce(p, targets.to_vec()), rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: DenseArray) -> NumResult<Var> {
        let av = self.value(a);
        av.expect_shape("mse", target.shape())?;
        let loss = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / av.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(DenseArray::scalar(loss), Op::Mse(a, target), rg))
    }

    /// `Σ_g weights[g] · parts[g]` for a weight vector of length `parts.len()`.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: Var) -> NumResult<Var> {
        let wv = self.value(weights).clone();
        if wv.len() != parts.len() {
            return Err(shape_err("weighted_sum", &[parts.len()], wv.shape()));
        }
        let mut out = DenseArray::zeros(self.value(parts[0]).shape());
        for (&p, &w) in parts.iter().zip(wv.data()) {
            let pv = self.value(p);
            pv.expect_shape("weighted_sum", out.shape())?;
            for (o, v) in out.data_mut().iter_mut().zip(pv.data()) {
                *o += w * v;
            }
        }
        let mut deps = parts.to_vec();
        deps.push(weights);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::WeightedSum(parts.to_vec(), weights), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> NumResult<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", &[1], self.value(loss).shape()));
        }
        let mut grads: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseArray::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<DenseArray>], v: Var, g: DenseArray) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<DenseArray>], v: Var, f: impl FnOnce() -> DenseArray) {
        if self.nodes[v.0].requires_grad {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn backprop_node(&self, node: &Node, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc_with(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || g.zip_map(bv, |x, y| x * y).expect("shape"));
                self.acc_with(grads, *b, || g.zip_map(av, |x, y| x * y).expect("shape"));
            }
            Op::Scale(a, f) => self.acc_with(grads, *a, || g.map(|x| x * f)),
            Op::Shift(a) => self.acc(grads, *a, g.clone()),
            Op::MulConst(a, m) => {
                self.acc_with(grads, *a, || g.zip_map(m, |x, y| x * y).expect("shape"))
            }
            Op::AddRowBias(x, bias) => {
                self.acc(grads, *x, g.clone());
                self.acc_with(grads, *bias, || {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    DenseArray::new(self.value(*bias).shape().to_vec(), db).expect("shape")
                });
            }
            Op::AddChannelBias(x, bias) => {
                self.acc(grads, *x, g.clone());
                self.acc_with(grads, *bias, || {
                    let (_, c, hw) = bn_dims(g.shape()).expect("rank");
                    let mut db = vec![0.0; c];
                    for (i, plane) in g.data().chunks(hw).enumerate() {
                        db[i % c] += plane.iter().sum::<f64>();
                    }
                    DenseArray::new(self.value(*bias).shape().to_vec(), db).expect("shape")
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc_with(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    DenseArray::new(vec![m, k], da).expect("shape")
                });
                self.acc_with(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    DenseArray::new(vec![k, n], db).expect("shape")
                });
            }
            Op::Transpose(a) => self.acc_with(grads, *a, || g.transpose()),
            Op::Act(a, kind) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, || {
                    let data = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .zip(out.data())
                        .map(|((&gi, &x), &y)| {
                            gi * match kind {
                                Activation::Elu => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        y + 1.0
                                    }
                                }
                                Activation::LeakyRelu => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        LEAKY_SLOPE
                                    }
                                }
                                Activation::Sigmoid => y * (1.0 - y),
                            }
                        })
                        .collect();
                    DenseArray::new(g.shape().to_vec(), data).expect("shape")
                });
            }
            Op::Exp(a) => self.acc_with(grads, *a, || g.zip_map(out, |x, y| x * y).expect("shape")),
            Op::RowNormalize(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, || {
                    let c = out.cols();
                    let mut da = vec![0.0; out.len()];
                    for i in 0..out.rows() {
                        let s: f64 = av.row(i).iter().sum();
                        let dot: f64 = g.row(i).iter().zip(out.row(i)).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            da[i * c + j] = (g.at(i, j) - dot) / s;
                        }
                    }
                    DenseArray::new(out.shape().to_vec(), da).expect("shape")
                });
            }
            Op::ColNormalize(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, || {
                    let (r, c) = (out.rows(), out.cols());
                    let mut sums = vec![0.0; c];
                    let mut dots = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            sums[j] += av.at(i, j);
                            dots[j] += g.at(i, j) * out.at(i, j);
                        }
                    }
                    let mut da = vec![0.0; out.len()];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = (g.at(i, j) - dots[j]) / sums[j];
                        }
                    }
                    DenseArray::new(out.shape().to_vec(), da).expect("shape")
                });
            }
            Op::OuterSum(a, b) => {
                let (n, m) = (out.rows(), out.cols());
                self.acc_with(grads, *a, || {
                    let d = (0..n).map(|i| g.row(i).iter().sum()).collect();
                    DenseArray::new(self.value(*a).shape().to_vec(), d).expect("shape")
                });
                self.acc_with(grads, *b, || {
                    let mut d = vec![0.0; m];
                    for i in 0..n {
                        for (dj, v) in d.iter_mut().zip(g.row(i)) {
                            *dj += v;
                        }
                    }
                    DenseArray::new(self.value(*b).shape().to_vec(), d).expect("shape")
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc_with(grads, p, || {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for i in 0..g.rows() {
                            d.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        DenseArray::new(vec![g.rows(), w], d).expect("shape")
                    });
                    offset += w;
                }
            }
            Op::GatherRows(a, idx) => {
                self.acc_with(grads, *a, || {
                    let mut d = DenseArray::zeros(self.value(*a).shape());
                    let c = d.cols();
                    for (k, &i) in idx.iter().enumerate() {
                        for (dst, v) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                            *dst += v;
                        }
                    }
                    d
                });
            }
            Op::SliceRows(a, start) => {
                self.acc_with(grads, *a, || {
                    let mut d = DenseArray::zeros(self.value(*a).shape());
                    let c = d.cols();
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    d
                });
            }
            Op::Reshape(a) => self.acc_with(grads, *a, || {
                g.clone().reshape(self.value(*a).shape()).expect("shape")
            }),
            Op::Conv2d {
                x,
                w,
                geom,
                out_channels,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let b = xv.shape()[0];
                let (o, ckk, p) = (*out_channels, geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                let mut cols = vec![0.0; ckk * p];
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; wv.len()];
                    for i in 0..b {
                        im2col(&xv.data()[i * img..(i + 1) * img], geom, &mut cols);
                        let gi = &g.data()[i * o * p..(i + 1) * o * p];
                        gemm(o, p, ckk, gi, false, &cols, true, &mut dw, 1.0);
                    }
                    self.acc(grads, *w, DenseArray::new(wv.shape().to_vec(), dw).expect("shape"));
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; xv.len()];
                    for i in 0..b {
                        let gi = &g.data()[i * o * p..(i + 1) * o * p];
                        gemm(ckk, o, p, wv.data(), true, gi, false, &mut cols, 0.0);
                        col2im(&cols, geom, &mut dx[i * img..(i + 1) * img]);
                    }
                    self.acc(grads, *x, DenseArray::new(xv.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                geom,
                in_channels,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let b = xv.shape()[0];
                let (cin, ckk) = (*in_channels, geom.col_rows());
                let p = geom.col_cols();
                let img = geom.channels * geom.height * geom.width;
                let mut cols = vec![0.0; ckk * p];
                let wrg = self.nodes[w.0].requires_grad;
                let xrg = self.nodes[x.0].requires_grad;
                let mut dw = vec![0.0; if wrg { wv.len() } else { 0 }];
                let mut dx = vec![0.0; if xrg { xv.len() } else { 0 }];
                for i in 0..b {
                    im2col(&g.data()[i * img..(i + 1) * img], geom, &mut cols);
                    let xi = &xv.data()[i * cin * p..(i + 1) * cin * p];
                    if wrg {
                        gemm(cin, p, ckk, xi, false, &cols, true, &mut dw, 1.0);
                    }
                    if xrg {
                        let dxi = &mut dx[i * cin * p..(i + 1) * cin * p];
                        gemm(cin, ckk, p, wv.data(), false, &cols, false, dxi, 0.0);
                    }
                }
                if wrg {
                    self.acc(grads, *w, DenseArray::new(wv.shape().to_vec(), dw).expect("shape"));
                }
                if xrg {
                    self.acc(grads, *x, DenseArray::new(xv.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                rows,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gv = self.value(*gamma);
                let (b, c, hw) = bn_dims(out.shape()).expect("rank");
                let mut dgamma = vec![0.0; gv.len()];
                let mut dbeta = vec![0.0; gv.len()];
                let mut dxhat = vec![0.0; out.len()];
                for i in 0..b {
                    let r = rows[i];
                    for ch in 0..c {
                        let gam = gv.at(r, ch);
                        let off = (i * c + ch) * hw;
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        for k in off..off + hw {
                            let gk = g.data()[k];
                            sg += gk;
                            sgx += gk * xhat[k];
                            dxhat[k] = gk * gam;
                        }
                        dbeta[r * c + ch] += sg;
                        dgamma[r * c + ch] += sgx;
                    }
                }
                self.acc(grads, *gamma, DenseArray::new(gv.shape().to_vec(), dgamma).expect("shape"));
                self.acc(grads, *beta, DenseArray::new(gv.shape().to_vec(), dbeta).expect("shape"));
                self.acc_with(grads, *x, || {
                    let mut dx = vec![0.0; out.len()];
                    if *batch_stats {
                        let m = (b * hw) as f64;
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for i in 0..b {
                            for ch in 0..c {
                                let off = (i * c + ch) * hw;
                                for k in off..off + hw {
                                    s1[ch] += dxhat[k];
                                    s2[ch] += dxhat[k] * xhat[k];
                                }
                            }
                        }
                        for i in 0..b {
                            for ch in 0..c {
                                let off = (i * c + ch) * hw;
                                for k in off..off + hw {
                                    dx[k] = inv_std[ch] / m
                                        * (m * dxhat[k] - s1[ch] - xhat[k] * s2[ch]);
                                }
                            }
                        }
                    } else {
                        for i in 0..b {
                            for ch in 0..c {
                                let off = (i * c + ch) * hw;
                                for k in off..off + hw {
                                    dx[k] = dxhat[k] * inv_std[ch];
                                }
                            }
                        }
                    }
                    DenseArray::new(out.shape().to_vec(), dx).expect("shape")
                });
            }
            Op::GlobalAvgPool(x) => {
                self.acc_with(grads, *x, || {
                    let xs = self.value(*x).shape();
                    let hw = xs[2] * xs[3];
                    let mut d = Vec::with_capacity(xs.iter().product());
                    for &v in g.data() {
                        d.extend(std::iter::repeat_n(v / hw as f64, hw));
                    }
                    DenseArray::new(xs.to_vec(), d).expect("shape")
                });
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.acc_with(grads, *a, || DenseArray::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gv = g.data()[0] / av.len() as f64;
                self.acc_with(grads, *a, || DenseArray::full(av.shape(), gv));
            }
            Op::Bce(p, targets) => {
                let pv = self.value(*p);
                let scale = g.data()[0] / targets.len() as f64;
                self.acc_with(grads, *p, || {
                    let d = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if p < PROB_CLAMP || p > 1.0 - PROB_CLAMP {
                                0.0
                            } else {
                                scale * (-y / p + (1.0 - y) / (1.0 - p))
                            }
                        })
                        .collect();
                    DenseArray::new(pv.shape().to_vec(), d).expect("shape")
                });
            }
            Op::Mse(a, target) => {
                let av = self.value(*a);
                let scale = 2.0 * g.data()[0] / av.len() as f64;
                self.acc_with(grads, *a, || {
                    av.zip_map(target, |x, y| scale * (x - y)).expect("shape")
                });
            }
            Op::WeightedSum(parts, weights) => {
                let wv = self.value(*weights);
                for (k, &p) in parts.iter().enumerate() {
                    let wk = wv.data()[k];
                    self.acc_with(grads, p, || g.map(|x| x * wk));
                }
                self.acc_with(grads, *weights, || {
                    let d = parts
                        .iter()
                        .map(|&p| {
                            g.data()
                                .iter()
                                .zip(self.value(p).data())
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    DenseArray::new(wv.shape().to_vec(), d).expect("shape")
                });
            }
        }
    }

    /// Adds the gradient of every parameter leaf into `params`.
    pub fn accumulate_param_grads(
        &self,
        grads: &Gradients,
        params: &mut ParamSet,
    ) -> NumResult<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &grads.grads[i]) {
                params.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}
