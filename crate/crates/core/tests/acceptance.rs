//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
//!
//! The training criteria (7–9) share one synthetic dataset and reuse runs:
//! the MAGAT/all/CBN/from-scratch configuration is the reference arm of all three.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use magat::cli::selfcheck::tiny_graph;
use magat::evalharness::{prepare, run_prepared, Adjacency, Dataset, ExperimentConfig, ExperimentReport, PretrainSource};
use magat::extractor::{prepare_batch, BandSet, BandStats, EncoderPass, Extractor, ExtractorConfig, NormKind};
use magat::gnn::{
    classify_pivot, fusion_gcn_layer, gat_layer, gcn_layer, magat_layer, Arch, AttnNorm, ClassifierHead, GnnConfig,
    GraphModel, HeadParams, MagatLayerParams,
};
use magat::graphbuild::{haversine, sinkhorn_normalize, stochastic_deviation, AffinityStack};
use magat::ingest::{synth_scene, PatchTensor, SynthConfig};
use magat::numcore::{grad_check, init_normal, DenseArray, Mode, NumError, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_layer(f_in: usize, f_int: usize, g: usize, residual: bool, rng: &mut ChaCha8Rng) -> MagatLayerParams {
    MagatLayerParams {
        heads: (0..g)
            .map(|_| HeadParams {
                v: init_normal(&[f_in, f_int], f_in, f_int, rng),
                p: init_normal(&[2 * f_int, 1], 2 * f_int, 1, rng),
                w: init_normal(&[f_in, f_int], f_in, f_int, rng),
            })
            .collect(),
        u: residual.then(|| init_normal(&[f_in, g * f_int], f_in, g * f_int, rng)),
    }
}

fn positive_stack(n: usize, g: usize, rng: &mut ChaCha8Rng) -> AffinityStack {
    let slices = (0..g)
        .map(|_| {
            let raw = DenseArray::new(vec![n, n], (0..n * n).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
            sinkhorn_normalize(&raw, 1e-12, 10_000).unwrap()
        })
        .collect();
    AffinityStack::new(slices, true).unwrap()
}

fn perm_fixing_zero(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut rest: Vec<usize> = (1..n).collect();
    rest.shuffle(rng);
    std::iter::once(0).chain(rest).collect()
}

fn sinkhorn_contract() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut pattern_broken = 0;
    for k in 0..1000 {
        let n = 11;
        let mut m = DenseArray::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                // every other matrix carries zeros off the diagonal
                if k % 2 == 0 || i == j || rng.random_bool(0.7) {
                    m.set(i, j, rng.random_range(0.01..10.0));
                }
            }
        }
        let s = sinkhorn_normalize(&m, 1e-9, 10_000).map_err(|e| e.to_string())?;
        worst = worst.max(stochastic_deviation(&s));
        if m.data().iter().zip(s.data()).any(|(a, b)| (*a == 0.0) != (*b == 0.0)) {
            pattern_broken += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst < 1e-6 && pattern_broken == 0 && secs < 5.0,
        format!("max deviation {worst:.2e}, {pattern_broken} zero patterns changed, {secs:.2}s"),
    )
}

fn sinkhorn_closed_form() -> Outcome {
    let m = DenseArray::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
    let s = sinkhorn_normalize(&m, 1e-12, 1000).map_err(|e| e.to_string())?;
    let want = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
    let d2 = s.data().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut d1 = 0.0f64;
    for n in 2..12 {
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        let m = DenseArray::new(vec![n, n], (0..n * n).map(|k| u[k / n] * v[k % n]).collect()).unwrap();
        let s = sinkhorn_normalize(&m, 1e-12, 1000).map_err(|e| e.to_string())?;
        d1 = s.data().iter().map(|x| (x - 1.0 / n as f64).abs()).fold(d1, f64::max);
    }
    verdict(d2 < 1e-6 && d1 < 1e-6, format!("2×2 error {d2:.2e}, rank-one error {d1:.2e}"))
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
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
    let (pool, sample) = tiny_graph(4, 8, 2, 21);
    let mut model = GraphModel::new(encoder, gnn, 2, 4).map_err(|e| e.to_string())?;
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
    let secs = t.elapsed().as_secs_f64();
    verdict(
        report.passed && report.max_rel_error < 1e-4 && secs < 60.0,
        format!(
            "{} entries, max relative error {:.2e} at {}, {secs:.2}s",
            report.checked, report.max_rel_error, report.worst_param
        ),
    )
}

fn cbn_tied_rows_gap() -> f64 {
    let cfg = |norm| ExtractorConfig {
        bands: BandSet::Spectral,
        blocks: 2,
        base_width: 4,
        feature_dim: 6,
        norm,
        stem_stride: 2,
    };
    let mut bn = Extractor::new(cfg(NormKind::Bn), "enc", 4).unwrap();
    let mut cbn = Extractor::new(cfg(NormKind::Cbn), "enc", 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, c) in cfg(NormKind::Bn).norm_layers("enc") {
        let g: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        bn.params.set(&format!("{name}.gamma"), DenseArray::new(vec![1, c], g.clone()).unwrap()).unwrap();
        bn.params.set(&format!("{name}.beta"), DenseArray::new(vec![1, c], b.clone()).unwrap()).unwrap();
        cbn.params.set(&format!("{name}.gamma"), DenseArray::new(vec![12, c], g.repeat(12)).unwrap()).unwrap();
        cbn.params.set(&format!("{name}.beta"), DenseArray::new(vec![12, c], b.repeat(12)).unwrap()).unwrap();
    }
    let (pool, _) = tiny_graph(5, 16, 1, 4);
    let refs: Vec<&PatchTensor> = pool.iter().collect();
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
    run(&cbn).max_abs_diff(&run(&bn))
}

fn reduction_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut gat_gap = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..10);
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
        let s = AffinityStack::new(vec![adj.clone()], false).unwrap();
        let (got, _) = magat_layer(&x, &s, &params, AttnNorm::RowSoftmax).map_err(|e| e.to_string())?;
        let want = gat_layer(&x, &adj, &w, &a).map_err(|e| e.to_string())?;
        gat_gap = gat_gap.max(got.max_abs_diff(&want));
    }
    let mut fusion_equal = true;
    for _ in 0..20 {
        let s = positive_stack(6, 1, &mut rng);
        let x = random(&[6, 4], &mut rng);
        let w = init_normal(&[4, 3], 4, 3, &mut rng);
        let beta = rng.random_range(-2.0..2.0);
        let fused = fusion_gcn_layer(&x, &s, &[w.clone()], &[beta]).map_err(|e| e.to_string())?;
        let plain = gcn_layer(&x, s.slice(0), &w).map_err(|e| e.to_string())?;
        fusion_equal &= fused.data() == plain.data();
    }
    let cbn_gap = cbn_tied_rows_gap();
    verdict(
        gat_gap < 1e-6 && fusion_equal && cbn_gap < 1e-6,
        format!("MAGAT vs GAT {gat_gap:.2e}; fusion(G=1) bitwise GCN: {fusion_equal}; tied CBN vs BN {cbn_gap:.2e}"),
    )
}

fn equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 11;
    let layers = [random_layer(5, 3, 3, true, &mut rng), random_layer(9, 3, 3, true, &mut rng)];
    let head = ClassifierHead {
        w: random(&[9, 1], &mut rng),
        b: 0.1,
    };
    let forward = |x: &DenseArray, s: &AffinityStack| -> (DenseArray, DenseArray, f64) {
        let (x1, s1) = magat_layer(x, s, &layers[0], AttnNorm::Sinkhorn).unwrap();
        let (x2, _) = magat_layer(&x1, &s1, &layers[1], AttnNorm::Sinkhorn).unwrap();
        let p = classify_pivot(&x2, 0, &head, 0.2, Mode::Eval, 0).unwrap();
        (x1, x2, p)
    };
    let mut pivot_gap = 0.0f64;
    let mut layer_gap = 0.0f64;
    for _ in 0..200 {
        let x = random(&[n, 5], &mut rng);
        let s = positive_stack(n, 3, &mut rng);
        let (x1, _, p) = forward(&x, &s);
        let perm = perm_fixing_zero(n, &mut rng);
        let (px1, _, q) = forward(&x.permute_rows(&perm), &s.permuted(&perm));
        pivot_gap = pivot_gap.max((p - q).abs());
        layer_gap = layer_gap.max(px1.max_abs_diff(&x1.permute_rows(&perm)));
    }
    verdict(
        pivot_gap < 1e-6 && layer_gap < 1e-6,
        format!("200 permutations: pivot change {pivot_gap:.2e}, layer output mismatch {layer_gap:.2e}"),
    )
}

/// Node 4 is masked out of the pivot's row (row softmax) or isolated from
/// every other node (sinkhorn); its features are then replaced at random.
fn masking_locality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for mode in [AttnNorm::RowSoftmax, AttnNorm::Sinkhorn] {
        for _ in 0..50 {
            let params = random_layer(3, 2, 2, true, &mut rng);
            let base = positive_stack(5, 2, &mut rng);
            let slices = base
                .slices()
                .iter()
                .map(|a| {
                    let mut a = a.clone();
                    for j in 0..5 {
                        if mode == AttnNorm::Sinkhorn && j != 4 {
                            a.set(4, j, 0.0);
                            a.set(j, 4, 0.0);
                        }
                    }
                    a.set(0, 4, 0.0);
                    a
                })
                .collect();
            let s = AffinityStack::new(slices, false).unwrap();
            let x = random(&[5, 3], &mut rng);
            let (a, _) = magat_layer(&x, &s, &params, mode).map_err(|e| e.to_string())?;
            let mut y = x.clone();
            for j in 0..3 {
                y.set(4, j, rng.random_range(-20.0..20.0));
            }
            let (b, _) = magat_layer(&y, &s, &params, mode).map_err(|e| e.to_string())?;
            worst = a.row(0).iter().zip(b.row(0)).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
        }
    }
    verdict(worst == 0.0, format!("max pivot change {worst:e} over 100 perturbations"))
}

fn hand_computed_forward() -> Outcome {
    let one = |v: f64| DenseArray::from_rows(&[vec![v]]).unwrap();
    let params = MagatLayerParams {
        heads: vec![HeadParams {
            v: one(1.0),
            p: DenseArray::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            w: one(1.0),
        }],
        u: Some(one(1.0)),
    };
    let s = AffinityStack::new(vec![DenseArray::full(&[2, 2], 1.0)], false).unwrap();
    let x = DenseArray::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    let (out, _) = magat_layer(&x, &s, &params, AttnNorm::Sinkhorn).map_err(|e| e.to_string())?;
    let (a, b) = (out.at(0, 0), out.at(1, 0));
    verdict(
        (a - 2.5).abs() < 1e-9 && (b - 3.5).abs() < 1e-9,
        format!("({a:.12}, {b:.12})"),
    )
}

fn haversine_oracles() -> Outcome {
    const R: f64 = 6371.0;
    let spherical = |a: (f64, f64), b: (f64, f64)| {
        let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
        let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * (b.1 - a.1).to_radians().cos();
        R * c.clamp(-1.0, 1.0).acos()
    };
    let (rome, milan) = ((41.9028, 12.4964), (45.4642, 9.19));
    let d = haversine(rome, milan);
    let want = spherical(rome, milan);
    let anti = haversine((10.0, 20.0), (-10.0, -160.0));
    let rel = (anti - std::f64::consts::PI * R).abs() / (std::f64::consts::PI * R);
    verdict(
        (d - want).abs() <= 1.0 && rel < 1e-6,
        format!("Rome–Milan {d:.3} km vs {want:.3} km; antipodal relative error {rel:.2e}"),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let bin = env!("CARGO_BIN_EXE_magat");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
        }
    };
    let data = root.join("data");
    let d = data.to_str().unwrap();
    run(&["gen-synth", "--seed", "3", "--sites", "120", "--patch-side", "16", "--out", d])?;
    let cfg = root.join("run.cfg");
    std::fs::write(
        &cfg,
        format!("data = {d}\nblocks = 1\nbase_width = 4\nfeature_dim = 8\nf_int = 4\nepochs = 2\n"),
    )
    .map_err(|e| e.to_string())?;
    let c = cfg.to_str().unwrap();
    let mut compared = 0;
    for arch in ["magat", "node_only"] {
        for seed in ["0", "11"] {
            let dirs: Vec<_> = (0..2).map(|k| root.join(format!("{arch}_{seed}_{k}"))).collect();
            for dir in &dirs {
                run(&["train", "--config", c, "--arch", arch, "--seed", seed, "--out", dir.to_str().unwrap()])?;
            }
            for file in ["report.txt", "report.csv"] {
                let read = |p: &Path| std::fs::read(p.join(file)).map_err(|e| e.to_string());
                if read(&dirs[0])? != read(&dirs[1])? {
                    return Err(format!("{arch} seed {seed}: {file} differs"));
                }
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} report pairs byte-identical"))
}

struct TrainingRuns {
    magat: ExperimentReport,
    node_only: ExperimentReport,
    uniform: ExperimentReport,
    bn: ExperimentReport,
    pretrained: ExperimentReport,
    ordering_time: Duration,
}

fn training_runs() -> Result<TrainingRuns, String> {
    let scene = synth_scene(&SynthConfig {
        n_sites: 2264,
        positive_rate: 0.347,
        patch_side: 16,
        site_noise: 0.7,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let dataset = Dataset::from_scene(scene, 7);
    let base = ExperimentConfig {
        encoder: ExtractorConfig {
            blocks: 2,
            base_width: 8,
            feature_dim: 16,
            stem_stride: 2,
            norm: NormKind::Cbn,
            ..ExtractorConfig::default()
        },
        gnn: GnnConfig {
            f_int: 8,
            ..GnnConfig::default()
        },
        epochs: 20,
        batch_size: 16,
        seeds: (0..5).collect(),
        ..ExperimentConfig::default()
    };
    let t = Instant::now();
    let mut all = base.clone();
    all.split.adjacency = Adjacency::All;
    let mut uniform = base.clone();
    uniform.split.adjacency = Adjacency::Uniform;
    let data_all = prepare(&dataset, &all.split).map_err(|e| e.to_string())?;
    let data_uniform = prepare(&dataset, &uniform.split).map_err(|e| e.to_string())?;
    let run = |data, cfg: &ExperimentConfig| {
        let t = Instant::now();
        let r = run_prepared(data, cfg).map_err(|e| e.to_string());
        eprintln!("  {} in {:.0}s", cfg.label(), t.elapsed().as_secs_f64());
        r
    };
    let magat = run(&data_all, &all)?;
    let mut node = all.clone();
    node.gnn.arch = Arch::NodeOnly;
    let node_only = run(&data_all, &node)?;
    let uniform = run(&data_uniform, &uniform)?;
    let ordering_time = t.elapsed();
    let mut bn_cfg = all.clone();
    bn_cfg.encoder.norm = NormKind::Bn;
    let bn = run(&data_all, &bn_cfg)?;
    let mut pre = all.clone();
    pre.pretrain = PretrainSource::Colorization;
    let pretrained = run(&data_all, &pre)?;
    Ok(TrainingRuns {
        magat,
        node_only,
        uniform,
        bn,
        pretrained,
        ordering_time,
    })
}

fn complete(reports: &[&ExperimentReport]) -> Result<(), String> {
    match reports.iter().flat_map(|r| &r.seeds).find_map(|s| s.result.as_ref().err().map(|e| (s.seed, e))) {
        Some((seed, e)) => Err(format!("seed {seed} failed: {e}")),
        None => Ok(()),
    }
}

fn planted_ordering(r: &TrainingRuns) -> Outcome {
    complete(&[&r.magat, &r.node_only, &r.uniform])?;
    let (m, n, u) = (r.magat.mean_f1(), r.node_only.mean_f1(), r.uniform.mean_f1());
    let mins = r.ordering_time.as_secs_f64() / 60.0;
    verdict(
        m - n >= 0.05 && m >= u - 0.02 && mins < 30.0,
        format!("F1 MAGAT {m:.4}, node-only {n:.4} (gap {:.4}), uniform {u:.4}; {mins:.1} min", m - n),
    )
}

fn cbn_direction(r: &TrainingRuns) -> Outcome {
    complete(&[&r.magat, &r.bn])?;
    let (c, b) = (r.magat.mean_f1(), r.bn.mean_f1());
    verdict(c >= b, format!("F1 CBN {c:.4}, BN {b:.4}"))
}

fn pretraining_direction(r: &TrainingRuns) -> Outcome {
    complete(&[&r.magat, &r.pretrained])?;
    let (ps, ss) = (r.pretrained.mean_best_epoch(), r.magat.mean_best_epoch());
    let (pf, sf) = (r.pretrained.mean_f1(), r.magat.mean_f1());
    verdict(
        ps < ss || pf >= sf - 0.01,
        format!("best epoch pretrained {ps:.1} vs scratch {ss:.1}; F1 {pf:.4} vs {sf:.4}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, outcome: Outcome| {
        let line = match outcome {
            Ok(d) => format!("PASS {id:>2} {name}: {d}"),
            Err(d) => {
                failed += 1;
                format!("FAIL {id:>2} {name}: {d}")
            }
        };
        println!("{line}");
    };
    report(1, "sinkhorn contract", sinkhorn_contract());
    report(2, "sinkhorn closed forms", sinkhorn_closed_form());
    report(3, "gradient fidelity", gradient_fidelity());
    report(4, "reduction oracles", reduction_oracles());
    report(5, "equivariance", equivariance());
    report(6, "masking locality", masking_locality());
    let runs = training_runs();
    let shared = |f: fn(&TrainingRuns) -> Outcome| runs.as_ref().map_err(Clone::clone).and_then(f);
    report(7, "planted-signal ordering", shared(planted_ordering));
    report(8, "cbn direction", shared(cbn_direction));
    report(9, "pretraining direction", shared(pretraining_direction));
    report(10, "hand-computed forward", hand_computed_forward());
    report(11, "haversine", haversine_oracles());
    report(12, "determinism", determinism());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
