//! Shallow baseline: logistic regression on per-patch band means,
//! coordinates and NDVI.

use crate::ingest::{Band, PatchTensor, SiteRecord, BAND_COUNT};
use crate::numcore::ops::sigmoid;
use crate::numcore::{bce_loss, DenseArray};

use super::{EvalError, EvalResult};

#[derive(Clone, Debug, PartialEq)]
pub struct HandcraftedFeatures {
    pub band_means: [f64; BAND_COUNT],
    pub lat: f64,
    pub lon: f64,
    pub ndvi: f64,
    /// Set when B8A + B4 is zero and NDVI was reported as 0.
    pub ndvi_undefined: bool,
}

impl HandcraftedFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.band_means.to_vec();
        v.extend([self.lat, self.lon, self.ndvi]);
        v
    }
}

pub fn handcrafted_features(patch: &PatchTensor, record: &SiteRecord) -> EvalResult<HandcraftedFeatures> {
    let mut band_means = [0.0; BAND_COUNT];
    for b in Band::ALL {
        band_means[b.index()] = patch
            .band_mean(b)
            .ok_or_else(|| EvalError::InvalidInput(format!("site {}: band {} has no valid pixels", record.id, b.name())))?;
    }
    let (nir, red) = (band_means[Band::B8A.index()], band_means[Band::B4.index()]);
    let den = nir + red;
    let (ndvi, ndvi_undefined) = if den == 0.0 { (0.0, true) } else { ((nir - red) / den, false) };
    Ok(HandcraftedFeatures {
        band_means,
        lat: record.lat,
        lon: record.lon,
        ndvi,
        ndvi_undefined,
    })
}

/// Column-standardises `train` and applies the same transform to `test`.
/// Constant columns are centred only.
pub fn standardize(train: &[Vec<f64>], test: &[Vec<f64>]) -> EvalResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let d = train.first().map(Vec::len).ok_or_else(|| EvalError::InvalidInput("empty training set".into()))?;
    if train.iter().chain(test).any(|r| r.len() != d) {
        return Err(EvalError::InvalidInput("ragged feature rows".into()));
    }
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| train.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|k| {
            let s = (train.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let apply = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().enumerate().map(|(k, v)| (v - mean[k]) / std[k]).collect())
            .collect()
    };
    Ok((apply(train), apply(test)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub probabilities: Vec<f64>,
    pub losses: Vec<f64>,
    /// False when the loss did not decrease over the last tenth of epochs.
    pub converged: bool,
}

/// Full-batch gradient descent on the mean log-loss; returns probabilities
/// for `test`.
pub fn logistic_baseline(
    train: &[Vec<f64>],
    labels: &[f64],
    test: &[Vec<f64>],
    lr: f64,
    epochs: usize,
) -> EvalResult<LogisticFit> {
    if train.is_empty() || train.len() != labels.len() {
        return Err(EvalError::InvalidInput("training rows and labels must be non-empty and aligned".into()));
    }
    if epochs == 0 || !(lr > 0.0) {
        return Err(EvalError::InvalidInput("epochs and lr must be positive".into()));
    }
    let d = train[0].len();
    let x = DenseArray::from_rows(train)?;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let n = train.len() as f64;
    let mut losses = Vec::with_capacity(epochs);
    let predict = |w: &[f64], b: f64, row: &[f64]| sigmoid(row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b);
    for _ in 0..epochs {
        let p: Vec<f64> = (0..x.rows()).map(|i| predict(&w, b, x.row(i))).collect();
        losses.push(bce_loss(&p, labels)?);
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (i, (pi, yi)) in p.iter().zip(labels).enumerate() {
            let r = pi - yi;
            gb += r;
            for (g, v) in gw.iter_mut().zip(x.row(i)) {
                *g += r * v;
            }
        }
        for (wk, g) in w.iter_mut().zip(&gw) {
            *wk -= lr * g / n;
        }
        b -= lr * gb / n;
    }
    let tail = (epochs / 10).max(1);
    let converged = epochs < 2 || losses[epochs - 1] < losses[epochs - 1 - tail.min(epochs - 1)];
    if !converged {
        log::warn!("logistic baseline loss did not decrease over the last {tail} epochs");
    }
    let probabilities = test
        .iter()
        .map(|r| {
            if r.len() != d {
                Err(EvalError::InvalidInput("test row width differs from training".into()))
            } else {
                Ok(predict(&w, b, r))
            }
        })
        .collect::<EvalResult<Vec<_>>>()?;
    Ok(LogisticFit {
        weights: w,
        bias: b,
        probabilities,
        losses,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalharness::metrics::{metrics, THRESHOLD};
    use crate::ingest::{Label, SiteId};
    use chrono::NaiveDate;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record() -> SiteRecord {
        SiteRecord {
            id: SiteId(3),
            lat: 44.5,
            lon: 11.25,
            observation_date: NaiveDate::from_ymd_opt(2018, 7, 1).unwrap(),
            label: Label::Positive,
            lst_day: None,
            lst_night: None,
            ssm: None,
        }
    }

    fn patch(values: [f32; BAND_COUNT]) -> PatchTensor {
        let px = 16;
        // pixel 0 is masked and carries the sentinel in every band
        let bands = values
            .iter()
            .flat_map(|&v| (0..px).map(move |i| if i == 0 { crate::ingest::NODATA } else { v }))
            .collect();
        let mask = (0..px).map(|i| i == 0).collect();
        PatchTensor::new(4, bands, mask, 20.0, NaiveDate::from_ymd_opt(2018, 7, 1).unwrap(), (44.5, 11.25)).unwrap()
    }

    #[test]
    fn ndvi_examples() {
        let mut v = [0.3; BAND_COUNT];
        v[Band::B8A.index()] = 0.6;
        v[Band::B4.index()] = 0.2;
        let f = handcrafted_features(&patch(v), &record()).unwrap();
        assert!((f.ndvi - 0.5).abs() < 1e-7);
        assert!(!f.ndvi_undefined);
        assert_eq!((f.lat, f.lon), (44.5, 11.25));

        let f = handcrafted_features(&patch([0.25; BAND_COUNT]), &record()).unwrap();
        assert_eq!(f.ndvi, 0.0);
        assert!(f.band_means.iter().all(|&m| m == 0.25));

        let f = handcrafted_features(&patch([0.0; BAND_COUNT]), &record()).unwrap();
        assert!(f.ndvi_undefined);
        assert_eq!(f.ndvi, 0.0);
        assert_eq!(f.to_vec().len(), BAND_COUNT + 3);
    }

    #[test]
    fn separable_data_is_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..200 {
            let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if (a + 0.5 * b).abs() < 0.1 {
                continue;
            }
            x.push(vec![a, b]);
            y.push(f64::from(u8::from(a + 0.5 * b > 0.0)));
        }
        let fit = logistic_baseline(&x, &y, &x, 1.0, 2000).unwrap();
        let m = metrics(&fit.probabilities, &y, THRESHOLD).unwrap();
        assert!(m.accuracy >= 0.99, "{m:?}");
        assert!(fit.converged);
    }

    #[test]
    fn zero_features_give_constant_probability() {
        let x = vec![vec![0.0; 3]; 10];
        let y: Vec<f64> = (0..10).map(|i| f64::from(u8::from(i < 3))).collect();
        let fit = logistic_baseline(&x, &y, &x[..4], 0.5, 500).unwrap();
        assert!(fit.probabilities.iter().all(|&p| p == sigmoid(fit.bias)));
        // converges to the class prior
        assert!((fit.probabilities[0] - 0.3).abs() < 1e-2);
    }

    #[test]
    fn permuted_labels_give_prior_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4000;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut y: Vec<f64> = x.iter().map(|r| f64::from(u8::from(r[0] > 0.4))).collect();
        y.shuffle(&mut rng);
        let (train, test) = x.split_at(n / 2);
        let (ytr, yte) = y.split_at(n / 2);
        let (train, test) = standardize(train, test).unwrap();
        let fit = logistic_baseline(&train, ytr, &test, 0.5, 300).unwrap();
        let m = metrics(&fit.probabilities, yte, THRESHOLD).unwrap();
        let prior = yte.iter().filter(|&&v| v == 0.0).count() as f64 / yte.len() as f64;
        assert!((m.accuracy - prior).abs() < 0.05, "{} vs {prior}", m.accuracy);
    }

    #[test]
    fn standardize_uses_train_statistics() {
        let train = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let test = vec![vec![5.0, 6.0]];
        let (a, b) = standardize(&train, &test).unwrap();
        assert_eq!(a, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(b, vec![vec![3.0, 1.0]]);
        assert!(standardize(&[], &test).is_err());
    }
}
