//! Stand-alone array operations: activations, batch normalisation with
//! month conditioning, binary cross-entropy and dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::DenseArray;
use super::error::{NumError, NumResult};
use super::tape::{BnStats, Tape};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const ELU_ALPHA: f64 = 1.0;
pub const PROB_CLAMP: f64 = 1e-7;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
pub const MONTHS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    LeakyRelu,
    Sigmoid,
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        ELU_ALPHA * x.exp_m1()
    }
}

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &DenseArray, kind: Activation) -> NumResult<DenseArray> {
    x.ensure_finite("activation")?;
    Ok(match kind {
        Activation::Elu => x.map(elu),
        Activation::LeakyRelu => x.map(leaky_relu),
        Activation::Sigmoid => x.map(sigmoid),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine parameters of a normalisation layer. Conditional layers carry one
/// row per calendar month; the unconditional variant has a single row.
#[derive(Clone, Debug, PartialEq)]
pub struct CbnParams {
    pub gamma: DenseArray,
    pub beta: DenseArray,
    pub epsilon: f64,
}

impl CbnParams {
    /// Identity affine transform over `channels` with one row per month.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: DenseArray::full(&[MONTHS, channels], 1.0),
            beta: DenseArray::zeros(&[MONTHS, channels]),
            epsilon: BN_EPSILON,
        }
    }

    pub fn validate(&self) -> NumResult<()> {
        if self.gamma.rank() != 2 || self.gamma.rows() != MONTHS {
            return Err(NumError::InvalidArgument(
                "conditional normalisation needs exactly 12 parameter rows".into(),
            ));
        }
        self.beta.expect_shape("CbnParams", self.gamma.shape())?;
        if self.epsilon <= 0.0 {
            return Err(NumError::InvalidArgument("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel running statistics used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential update with the batch's biased mean/variance; the stored
    /// variance uses the unbiased estimate.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], count: usize) {
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * batch_mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * batch_var[c] * unbias;
        }
    }
}

/// Maps calendar months (1..=12) to zero-based parameter rows.
pub fn month_rows(months: &[u8]) -> NumResult<Vec<usize>> {
    months
        .iter()
        .map(|&m| {
            if (1..=12).contains(&m) {
                Ok(usize::from(m - 1))
            } else {
                Err(NumError::InvalidMonth(m))
            }
        })
        .collect()
}

/// Month-conditioned batch normalisation over a `B×C×H×W` (or `B×C`) batch.
///
/// In train mode the batch statistics normalise the input and `running` is
/// updated; in eval mode `running` is used as-is.
pub fn cond_batch_norm(
    h: &DenseArray,
    months: &[u8],
    params: &CbnParams,
    running: &mut RunningStats,
    mode: Mode,
) -> NumResult<DenseArray> {
    params.validate()?;
    let rows = month_rows(months)?;
    if h.shape()[0] != months.len() {
        return Err(NumError::Shape {
            op: "cond_batch_norm",
            expected: vec![months.len()],
            got: h.shape().to_vec(),
        });
    }
    if mode == Mode::Train && months.len() < 2 {
        return Err(NumError::InvalidArgument(
            "train-mode normalisation needs a batch of at least 2".into(),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let g = tape.constant(params.gamma.clone());
    let b = tape.constant(params.beta.clone());
    let stats = match mode {
        Mode::Train => BnStats::Batch,
        Mode::Eval => BnStats::Fixed {
            mean: running.mean.clone(),
            var: running.var.clone(),
        },
    };
    let (y, batch) = tape.batch_norm(x, g, b, &rows, params.epsilon, stats)?;
    if let Some((mean, var, count)) = batch {
        running.update(&mean, &var, count);
    }
    Ok(tape.value(y).clone())
}

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn bce_loss(p: &[f64], y: &[f64]) -> NumResult<f64> {
    if p.len() != y.len() {
        return Err(NumError::Shape {
            op: "bce_loss",
            expected: vec![y.len()],
            got: vec![p.len()],
        });
    }
    if p.is_empty() {
        return Err(NumError::InvalidArgument("empty input".into()));
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// Bernoulli keep-mask scaled by `1/(1-p)`; all ones when `p == 0`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> NumResult<DenseArray> {
    if !(0.0..1.0).contains(&p) {
        return Err(NumError::InvalidArgument(format!(
            "drop probability must be in [0, 1), got {p}"
        )));
    }
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    DenseArray::new(shape.to_vec(), data)
}

pub fn dropout(x: &DenseArray, p: f64, mode: Mode, seed: u64) -> NumResult<DenseArray> {
    if !(0.0..1.0).contains(&p) {
        return Err(NumError::InvalidArgument(format!(
            "drop probability must be in [0, 1), got {p}"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask(x.shape(), p, &mut rng)?;
    x.zip_map(&mask, |a, m| a * m)
}
