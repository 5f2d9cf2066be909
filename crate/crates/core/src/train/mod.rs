//! Finetuning loop, checkpoints and evaluation.

mod checkpoint;
mod config;
mod data;
mod finetune;
mod optimizer;

pub use checkpoint::{Checkpoint, CheckpointHeader, EpochRecord, EvalSummary, CHECKPOINT_MAGIC};
pub use config::{canonical_json, OptimizerConfig, OptimizerKind, TrainConfig};
pub use data::{epoch_order, Batch, Dataset};
pub use finetune::{confusion, evaluate, finetune, resume, score, summarize, TrainOutcome};
pub use optimizer::Optimizer;

use crate::ingest::IngestError;
use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::nn::ModelError;
use crate::taxonomy::TaxonomyError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("CONFIG_ERROR: {0}")]
    Config(String),
    #[error("DIVERGED: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("SPLIT_VIOLATION: {count} training entries in an evaluation set (first at index {first})")]
    SplitViolation { count: usize, first: usize },
    #[error("EMPTY_DATASET: `{0}` has no samples")]
    EmptyManifest(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
