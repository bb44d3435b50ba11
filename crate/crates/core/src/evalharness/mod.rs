//! Metrics, seeded experiment runs, ablations and feature export.

pub mod baseline;
pub mod dataset;
pub mod experiment;
pub mod metrics;

use thiserror::Error;

use crate::extractor::ExtractError;
use crate::gnn::GnnError;
use crate::graphbuild::GraphError;
use crate::ingest::IngestError;
use crate::numcore::NumError;

pub use baseline::{handcrafted_features, logistic_baseline, standardize, HandcraftedFeatures, LogisticFit};
pub use dataset::{prepare, Adjacency, Dataset, PreparedData, SplitConfig};
pub use experiment::{
    ablation_cells, ablation_matrix, comparison_table, export_features, run_experiment, run_prepared, train_seed,
    AblationCell, Axis, BandChoice, ExperimentConfig, ExperimentReport, PretrainSource, SeedOutcome, SeedResult,
};
pub use metrics::{metrics, summarize, MetricsBundle, THRESHOLD};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown ablation axis or value: {0}")]
    InvalidAxis(String),
    /// A non-training patch reached a training batch.
    #[error("split leak: {0}")]
    Leak(String),
}

pub type EvalResult<T> = Result<T, EvalError>;
