//! Multi-adjacency graph attention for site-level binary classification of
//! multi-band raster patches.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`] — dense arrays, a small reverse-mode tape, losses, SGD,
//!   gradient checking and checkpoints.
//! * [`ingest`] — patch/site data plane and the synthetic scene generator.
//! * [`graphbuild`] — k-NN neighbourhoods and doubly-stochastic affinities.
//! * [`extractor`] — month-conditioned residual CNN and colorization pretext.
//! * [`gnn`] — the MAGAT layer, GCN/GAT/Fusion-GCN baselines, readout.
//! * [`evalharness`] — metrics, seeded experiments, ablations, exports.
//! * [`cli`] — the `magat` command-line front end.

pub mod cli;
pub mod evalharness;
pub mod extractor;
pub mod gnn;
pub mod graphbuild;
pub mod ingest;
pub mod numcore;
