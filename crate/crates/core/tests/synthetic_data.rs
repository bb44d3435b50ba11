//! Statistical properties of the synthetic scene generator.

use magat::evalharness::{handcrafted_features, logistic_baseline, metrics, standardize, THRESHOLD};
use magat::ingest::{synth_scene, synth_sites, Label, SynthConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn prevalence_matches_requested_rate() {
    for (seed, rate) in [(1, 0.347), (2, 0.5)] {
        let cfg = SynthConfig {
            seed,
            n_sites: 10_000,
            positive_rate: rate,
            min_spacing_km: 0.0,
            ..SynthConfig::default()
        };
        let sites = synth_sites(&cfg).unwrap();
        let pos = sites.iter().filter(|s| s.label == Label::Positive).count() as f64 / sites.len() as f64;
        assert!((pos - rate).abs() <= 0.02, "seed {seed}: {pos} vs {rate}");
    }
}

/// Test accuracy of a logistic model on handcrafted features, plus the same
/// statistic under `perms` shuffles of the training labels.
fn accuracy_and_null(signal: f64, perms: usize) -> (f64, Vec<f64>) {
    let cfg = SynthConfig {
        seed: 21,
        n_sites: 800,
        signal_strength: signal,
        patch_side: 8,
        cloud_probability: 0.0,
        ..SynthConfig::default()
    };
    let scene = synth_scene(&cfg).unwrap();
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (sp, rec) in scene.patches.iter().zip(&scene.records) {
        assert_eq!(sp.site_id, rec.id);
        let f = handcrafted_features(&sp.patch, rec).unwrap().to_vec();
        let side = if rec.id.0 % 3 == 0 { &mut test } else { &mut train };
        side.0.push(f);
        side.1.push(rec.label.as_f64());
    }
    let (xtr, xte) = standardize(&train.0, &test.0).unwrap();
    let score = |labels: &[f64]| {
        let fit = logistic_baseline(&xtr, labels, &xte, 0.5, 300).unwrap();
        metrics(&fit.probabilities, &test.1, THRESHOLD).unwrap().accuracy
    };
    let observed = score(&train.1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let null = (0..perms)
        .map(|_| {
            let mut y = train.1.clone();
            y.shuffle(&mut rng);
            score(&y)
        })
        .collect();
    (observed, null)
}

fn p_value(observed: f64, null: &[f64]) -> f64 {
    (1 + null.iter().filter(|&&v| v >= observed).count()) as f64 / (1 + null.len()) as f64
}

#[test]
fn zero_signal_is_chance_level() {
    let (obs, null) = accuracy_and_null(0.0, 40);
    let p = p_value(obs, &null);
    assert!(p > 0.05, "zero-signal accuracy {obs} beats the permutation null (p = {p})");
}

#[test]
fn planted_signal_beats_permutation_null() {
    let (obs, null) = accuracy_and_null(3.0, 40);
    let p = p_value(obs, &null);
    assert!(p <= 0.05, "accuracy {obs}, p = {p}");
}
