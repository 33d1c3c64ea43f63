use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing parent directory for {0}")]
    MissingParent(PathBuf),
    #[error("missing metadata sidecar {0}")]
    MissingMetadata(PathBuf),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("capture too short: {n_samples} samples, need at least {min}")]
    CaptureTooShort { n_samples: usize, min: usize },
    #[error("expected {expected} samples, got {found}")]
    WrongLength { expected: usize, found: usize },
    #[error("degenerate slice (zero energy) at device {device_id} slice {slice_index}")]
    DegenerateSlice { device_id: u32, slice_index: usize },
    #[error("need ≥ 2 devices, got {0}")]
    TooFewDevices(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("device {0} has no valid slices")]
    NoValidSlices(u32),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("unsupported version: {0}")]
    UnsupportedVersion(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch-norm running statistics are untrained; eval mode needs at least one training step")]
    UntrainedBatchNorm,
    #[error("loss became NaN at epoch {epoch}, batch {batch} (last finite loss {last_loss})")]
    NanLoss { epoch: usize, batch: usize, last_loss: f64 },
    #[error("label {label} out of range for {n_classes} classes")]
    BadLabel { label: usize, n_classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("device {0} has no correctly classified slices; fingerprint undefined")]
    NoCorrectSlices(u32),
    #[error("degenerate ranking: both inputs are constant")]
    DegenerateRanking,
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("empty test group {0}")]
    EmptyGroup(String),
    #[error("auprc needs at least one positive and one negative label")]
    NoPositives,
    #[error("weibull fit failed: {0}")]
    WeibullFit(String),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
