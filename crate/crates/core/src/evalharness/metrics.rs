use super::{EvalError, EvalResult};

/// Decision threshold on predicted probabilities.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsBundle {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl MetricsBundle {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> EvalResult<Self> {
        let total = tp + fp + tn + fn_;
        if total == 0 {
            return Err(EvalError::InvalidInput("no samples".into()));
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(Self {
            accuracy: (tp + tn) as f64 / total as f64,
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
        })
    }

    /// `[acc, pr, rc, f1]` in report column order.
    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

pub fn metrics(probabilities: &[f64], labels: &[f64], threshold: f64) -> EvalResult<MetricsBundle> {
    if probabilities.len() != labels.len() {
        return Err(EvalError::InvalidInput(format!(
            "{} probabilities for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(EvalError::InvalidInput("no samples".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in probabilities.iter().zip(labels) {
        let positive = match y {
            v if v == 1.0 => true,
            v if v == 0.0 => false,
            v => return Err(EvalError::InvalidInput(format!("label {v} is not binary"))),
        };
        match (p >= threshold, positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    MetricsBundle::from_counts(tp, fp, tn, fn_)
}

/// Mean and population standard deviation of each of `[acc, pr, rc, f1]`.
pub fn summarize(bundles: &[MetricsBundle]) -> ([f64; 4], [f64; 4]) {
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    if bundles.is_empty() {
        return (mean, std);
    }
    let n = bundles.len() as f64;
    for k in 0..4 {
        let vals: Vec<f64> = bundles.iter().map(|b| b.values()[k]).collect();
        mean[k] = vals.iter().sum::<f64>() / n;
        std[k] = (vals.iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
    }
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_arithmetic() {
        // 2 TP, 1 FP, 1 FN, 6 TN
        let p = [0.9, 0.8, 0.7, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];
        let y = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let m = metrics(&p, &y, THRESHOLD).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (2, 1, 1, 6));
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.8);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = metrics(&[0.9, 0.1], &[1.0, 0.0], THRESHOLD).unwrap();
        assert_eq!(m.values(), [1.0; 4]);
        let none = metrics(&[0.1, 0.2, 0.3], &[1.0, 0.0, 1.0], THRESHOLD).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(metrics(&[], &[], THRESHOLD).is_err());
        assert!(metrics(&[0.5], &[0.5], THRESHOLD).is_err());
        assert!(metrics(&[0.5], &[1.0, 0.0], THRESHOLD).is_err());
    }

    #[test]
    fn summary_of_known_values() {
        let a = MetricsBundle::from_counts(1, 0, 1, 0).unwrap();
        let b = MetricsBundle::from_counts(0, 1, 0, 1).unwrap();
        let (mean, std) = summarize(&[a, b]);
        assert_eq!(mean, [0.5; 4]);
        assert_eq!(std, [0.5; 4]);
    }

    proptest! {
        #[test]
        fn counting_identities(pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..200)) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let y: Vec<f64> = pairs.iter().map(|x| f64::from(u8::from(x.1))).collect();
            let m = metrics(&p, &y, THRESHOLD).unwrap();
            prop_assert_eq!(m.tp + m.fp + m.tn + m.fn_, p.len());
            prop_assert_eq!(m.accuracy, (m.tp + m.tn) as f64 / p.len() as f64);
            if m.precision + m.recall > 0.0 {
                let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - h).abs() < 1e-15);
            }
            for v in m.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn summary_mean_is_arithmetic_mean(counts in prop::collection::vec((0usize..20, 0usize..20, 0usize..20, 1usize..20), 1..8)) {
            let bundles: Vec<_> = counts.iter().map(|&(a, b, c, d)| MetricsBundle::from_counts(a, b, c, d).unwrap()).collect();
            let (mean, _) = summarize(&bundles);
            for k in 0..4 {
                let vals: Vec<f64> = bundles.iter().map(|b| b.values()[k]).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(mean[k] >= lo - 1e-12 && mean[k] <= hi + 1e-12);
                prop_assert!((mean[k] - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-12);
            }
        }
    }
}
