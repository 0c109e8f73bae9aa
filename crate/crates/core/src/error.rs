use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward already ran on this tape; re-run the forward pass first")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("attention map value {value} outside [0, 1]")]
    AttentionOutOfRange { value: f64 },

    #[error("model must be in inference mode for this operation")]
    NotInferenceMode,

    #[error("empty dataset")]
    EmptyDataset,

    #[error(
        "training diverged at epoch {epoch}, step {step}: {diagnostics}"
    )]
    Diverged {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },

    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("checkpoint is not an AAL checkpoint (bad magic)")]
    CheckpointMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checksum failure in checkpoint section {section:?}")]
    Checksum { section: String },

    #[error("checkpoint is missing section {0:?}")]
    MissingSection(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
