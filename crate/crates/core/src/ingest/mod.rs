//! Dataset discovery, preprocessing and manifest files.

mod manifest;
mod preprocess;
mod scan;

pub use manifest::{hash_entries, DatasetManifest};
pub use preprocess::{
    preprocess_images, preprocess_sample, resize_mask_nearest, Normalization, PreparedSample, PreprocessSpec,
};
pub use scan::{expected_count, scan_dataset, ScanOptions, ScanOutcome};

use std::path::{Path, PathBuf};

use crate::taxonomy::TaxonomyError;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("EMPTY_DATASET: no image/mask pairs under {0}")]
    EmptyDataset(PathBuf),
    #[error("CORRUPT_FILE {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("PARSE_ERROR line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid preprocess spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
