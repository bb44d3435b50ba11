//! Fast invariant suite behind `magat selfcheck`.

use std::fmt;
use std::time::Instant;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::extractor::{BandSet, BandStats, ExtractorConfig, NormKind};
use crate::gnn::{
    fusion_gcn_layer, gat_layer, gcn_layer, magat_layer, AttnNorm, GnnConfig, GraphModel, GraphSample, HeadParams,
    MagatLayerParams,
};
use crate::graphbuild::{sinkhorn_normalize, stochastic_deviation, AffinityStack};
use crate::ingest::{PatchTensor, SiteId, BAND_COUNT};
use crate::numcore::{grad_check, init_normal, DenseArray, NumError};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check {
        name,
        passed,
        detail: format!("{detail} ({:.2}s)", t.elapsed().as_secs_f64()),
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Random 11×11 matrices with a positive diagonal and ~30% zeros elsewhere.
fn sinkhorn_random() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = 11;
        let mut m = DenseArray::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if i == j || rng.random_bool(0.7) {
                    m.set(i, j, rng.random_range(0.01..5.0));
                }
            }
        }
        let s = sinkhorn_normalize(&m, 1e-9, 10_000).map_err(|e| e.to_string())?;
        worst = worst.max(stochastic_deviation(&s));
        if m.data().iter().zip(s.data()).any(|(a, b)| (*a == 0.0) != (*b == 0.0)) {
            return Err("zero pattern changed".into());
        }
    }
    if worst < 1e-6 {
        Ok(format!("200 matrices, max deviation {worst:.2e}"))
    } else {
        Err(format!("max deviation {worst:.2e}"))
    }
}

fn gradient_check() -> Result<String, String> {
    let encoder = ExtractorConfig {
        bands: BandSet::Spectral,
        blocks: 1,
        base_width: 4,
        feature_dim: 4,
        norm: NormKind::Cbn,
        stem_stride: 1,
    };
    let gnn = GnnConfig {
        layers: 2,
        f_int: 2,
        dropout: 0.0,
        tol: 1e-13,
        max_iter: 5000,
        ..GnnConfig::default()
    };
    let (pool, sample) = tiny_graph(4, 8, 2, 3);
    let mut model = GraphModel::new(encoder, gnn, 2, 5).map_err(|e| e.to_string())?;
    model.input = BandStats::fit(pool.iter());
    let samples = [&sample];
    let report = grad_check(
        |tape, params| {
            model
                .batch_loss(tape, params, &pool, &samples)
                .map_err(|e| NumError::InvalidArgument(e.to_string()))
        },
        &model.params,
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    let detail = format!(
        "{} entries, max relative error {:.2e} at {}[{}]",
        report.checked, report.max_rel_error, report.worst_param, report.worst_index
    );
    if report.passed {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `n` random patches of side `side` and one graph over them with `depth`
/// positive doubly-stochastic slices.
pub fn tiny_graph(n: usize, side: usize, depth: usize, seed: u64) -> (Vec<PatchTensor>, GraphSample) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = side * side;
    let pool = (0..n)
        .map(|k| {
            let bands = (0..BAND_COUNT * px).map(|_| rng.random_range(0.0..0.4f32)).collect();
            let date = NaiveDate::from_ymd_opt(2018, 1 + (k % 12) as u32, 10).expect("valid date");
            PatchTensor::new(side, bands, vec![false; px], 20.0, date, (44.0, 11.0 + k as f64 * 0.01))
                .expect("consistent patch")
        })
        .collect();
    let slices = (0..depth)
        .map(|_| {
            let raw = DenseArray::new(vec![n, n], (0..n * n).map(|_| rng.random_range(0.1..1.0)).collect())
                .expect("square");
            sinkhorn_normalize(&raw, 1e-12, 10_000).expect("positive matrix converges")
        })
        .collect();
    let sample = GraphSample {
        site_id: SiteId(0),
        nodes: (0..n).collect(),
        affinities: AffinityStack::new(slices, true).expect("square slices"),
        label: 1.0,
    };
    (pool, sample)
}

fn reductions() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = 7;
        let x = random(&[n, 4], &mut rng);
        let mut adj = DenseArray::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if i == j || rng.random_bool(0.5) {
                    adj.set(i, j, 1.0);
                }
            }
        }
        let w = random(&[4, 3], &mut rng);
        let a = random(&[6, 1], &mut rng);
        let params = MagatLayerParams {
            heads: vec![HeadParams {
                v: w.clone(),
                p: a.clone(),
                w: w.clone(),
            }],
            u: None,
        };
        let s = AffinityStack::new(vec![adj.clone()], false).map_err(|e| e.to_string())?;
        let (got, _) = magat_layer(&x, &s, &params, AttnNorm::RowSoftmax).map_err(|e| e.to_string())?;
        let want = gat_layer(&x, &adj, &w, &a).map_err(|e| e.to_string())?;
        worst = worst.max(got.max_abs_diff(&want));
    }
    if worst >= 1e-6 {
        return Err(format!("magat vs gat differ by {worst:.2e}"));
    }
    let x = random(&[6, 4], &mut rng);
    let w = init_normal(&[4, 3], 4, 3, &mut rng);
    let raw = DenseArray::new(vec![6, 6], (0..36).map(|_| rng.random_range(0.1..1.0)).collect()).expect("square");
    let s = AffinityStack::new(vec![sinkhorn_normalize(&raw, 1e-10, 1000).map_err(|e| e.to_string())?], true)
        .map_err(|e| e.to_string())?;
    let fused = fusion_gcn_layer(&x, &s, &[w.clone()], &[0.0]).map_err(|e| e.to_string())?;
    let plain = gcn_layer(&x, s.slice(0), &w).map_err(|e| e.to_string())?;
    if fused.data() != plain.data() {
        return Err("single-slice fusion differs from gcn".into());
    }
    Ok(format!("magat→gat max diff {worst:.2e}; fusion(G=1) ≡ gcn"))
}

pub fn run() -> Vec<Check> {
    vec![
        check("sinkhorn", sinkhorn_random),
        check("gradients", gradient_check),
        check("reductions", reductions),
    ]
}
