//! Experiment grids: expansion, execution, aggregation, plots and tables.

mod aggregate;
mod config;
mod plot;
mod run;
mod table;

pub use aggregate::{aggregate, mean_ci, metric_names, metric_value, Aggregate};
pub use config::{
    BackboneConfig, Cell, CellConfig, CompositionConfig, DataConfig, Dtype, EvalConfig, ExperimentConfig, ExperimentGrid,
    GridConfig, OutputConfig, ReferenceLine, Setting, SyntheticData, TrainSet, AXES,
};
pub use plot::{confusion_intensities, plot_sweep, PlotKind, PlotOptions};
pub use run::{
    compose_train_set, load_result, prepare_inputs, read_emitted_aggregates, run, run_grid, CellRecord, CellReport, CellStatus,
    FailedCell, Inputs, RunOptions, SweepResult,
};
pub use table::{emit_table, Selection, TableFormat};

use std::path::{Path, PathBuf};

use crate::composition::CompositionError;
use crate::ingest::IngestError;
use crate::nn::ModelError;
use crate::train::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("CONFIG_ERROR: {0}")]
    Config(String),
    #[error("MISSING_INPUT: {0}")]
    MissingInput(String),
    #[error("MISSING_AXIS: `{0}` is not an axis of this sweep")]
    MissingAxis(String),
    #[error("EMPTY_SELECTION: no completed cells match {0}")]
    EmptySelection(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Whether the error stems from the configuration rather than a run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::MissingInput(_) | Self::MissingAxis(_) | Self::Train(TrainError::Config(_)) | Self::Model(ModelError::Config(_))
        )
    }
}
