//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("dataset '{dataset}' has {available} classes, {needed} required")]
    TooFewClasses {
        dataset: String,
        available: usize,
        needed: usize,
    },

    #[error("class '{class}' has {available} items, {needed} required")]
    TooFewItems {
        class: String,
        available: usize,
        needed: usize,
    },

    #[error("dataset '{0}' is empty")]
    EmptyDataset(String),

    #[error("class directory '{0}' contains no images")]
    EmptyClassDir(PathBuf),

    #[error("dataset root '{0}' is missing or has no class subdirectories")]
    MissingRoot(PathBuf),

    #[error("cannot decode image '{path}': {reason}")]
    UndecodableImage { path: PathBuf, reason: String },

    #[error("classifier head expects {expected} classes, dataset has {actual}")]
    ClassCountMismatch { expected: usize, actual: usize },

    #[error("backbone '{0}' is not built at desk scale")]
    UnsupportedBackbone(String),

    #[error("invalid config:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("checkpoint contradicts requesting config:\n{}", .0.join("\n"))]
    CheckpointMismatch(Vec<String>),

    #[error("checkpoint file is malformed: {0}")]
    MalformedCheckpoint(String),

    #[error("report config hash {report} does not match checkpoint hash {checkpoint}")]
    ProvenanceMismatch { report: String, checkpoint: String },

    #[error("feature sample needs at least {needed} rows, got {got}")]
    SampleTooSmall { needed: usize, got: usize },

    #[error("feature dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("duplicate ablation row label '{0}'")]
    DuplicateRowLabel(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
