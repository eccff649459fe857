use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DfkdError>;

#[derive(Debug, Error)]
pub enum DfkdError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("cannot rotate a non-square {height}x{width} image by {quarter_turns} quarter turns")]
    NonSquare {
        height: usize,
        width: usize,
        quarter_turns: u8,
    },

    #[error("unsupported rotation count M={0} (pixel-exact rotations need M in {{2, 4}})")]
    UnsupportedRotationCount(usize),

    #[error("checkpoint kind mismatch in {path}: expected `{expected}`, found `{found}`")]
    KindMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("checkpoint architecture mismatch in {path}: expected {expected}, found {found}")]
    ArchitectureMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("non-finite loss in {stage} at step {step}: {detail}")]
    NonFinite {
        stage: &'static str,
        step: usize,
        detail: String,
    },

    #[error("image bank is empty")]
    EmptyBank,

    #[error("corrupt image bank at {path}: {reason}")]
    CorruptBank { path: PathBuf, reason: String },

    #[error("empty evaluation set")]
    EmptyDataset,

    #[error("dataset missing: {0}")]
    DatasetMissing(String),

    #[error("unknown {kind} `{name}`")]
    UnknownVariant { kind: &'static str, name: String },

    #[error("run directory {dir} was created with config hash {found}, current config hashes to {expected}")]
    ResumeMismatch {
        dir: PathBuf,
        expected: String,
        found: String,
    },

    #[error("missing metrics: {0}")]
    MissingMetrics(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("plotting failed: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl DfkdError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DfkdError::Shape(msg.into())
    }
}
