use magat::extractor::{colorize_pretrain, BandSet, ExtractorConfig, NormKind, PretrainConfig};
use magat::ingest::{synth_scene, SynthConfig};

#[test]
fn colorization_loss_decreases_on_synthetic_patches() {
    let scene = synth_scene(&SynthConfig {
        seed: 3,
        n_sites: 500,
        patch_side: 16,
        cloud_probability: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let patches: Vec<_> = scene.patches.into_iter().map(|sp| sp.patch).collect();
    let enc = ExtractorConfig {
        bands: BandSet::Spectral,
        blocks: 2,
        base_width: 8,
        feature_dim: 16,
        norm: NormKind::Cbn,
        stem_stride: 2,
    };
    let out = colorize_pretrain(
        &patches,
        &enc,
        &PretrainConfig {
            epochs: 10,
            lr: 0.01,
            batch_size: 16,
            seed: 4,
        },
    )
    .unwrap();
    let l = &out.epoch_losses;
    assert_eq!(l.len(), 10);
    assert!(l.iter().all(|v| v.is_finite()));
    assert!(l[9] < l[0], "{l:?}");
    assert_eq!(out.corpus_hash.len(), 64);
}
