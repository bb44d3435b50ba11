//! Finite-difference check through encoder, two attention layers and head.

use magat::cli::selfcheck::tiny_graph;
use magat::extractor::{BandSet, BandStats, ExtractorConfig, NormKind};
use magat::gnn::{Arch, AttnNorm, GnnConfig, GraphModel};
use magat::numcore::{grad_check, NumError};

fn check(arch: Arch, mode: AttnNorm, norm: NormKind) {
    let encoder = ExtractorConfig {
        bands: BandSet::Spectral,
        blocks: 1,
        base_width: 4,
        feature_dim: 4,
        norm,
        stem_stride: 1,
    };
    let gnn = GnnConfig {
        arch,
        layers: 2,
        f_int: 2,
        mode,
        dropout: 0.0,
        tol: 1e-13,
        max_iter: 5000,
        ..GnnConfig::default()
    };
    let (pool, sample) = tiny_graph(4, 8, 2, 9);
    let mut model = GraphModel::new(encoder, gnn, 2, 17).unwrap();
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
    .unwrap();
    assert!(report.passed, "{arch} {mode}: {report:?}");
    assert_eq!(report.checked, model.params.iter().map(|(_, v)| v.len()).sum::<usize>());
}

#[test]
fn magat_sinkhorn_end_to_end() {
    check(Arch::Magat, AttnNorm::Sinkhorn, NormKind::Cbn);
}

#[test]
fn magat_row_softmax_end_to_end() {
    check(Arch::Magat, AttnNorm::RowSoftmax, NormKind::Bn);
}

#[test]
fn baselines_end_to_end() {
    for arch in [Arch::Gcn, Arch::Gat, Arch::FusionGcn, Arch::NodeOnly] {
        check(arch, AttnNorm::Sinkhorn, NormKind::Cbn);
    }
}
