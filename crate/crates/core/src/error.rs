use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("kernel {kernel:?} larger than padded input {padded:?}")]
    KernelTooLarge { kernel: [usize; 2], padded: [usize; 2] },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f32),

    #[error("temperature mismatch: {0} vs {1}")]
    TemperatureMismatch(f32, f32),

    #[error("{name} must lie in [0, 1], got {value}")]
    WeightOutOfRange { name: &'static str, value: f32 },

    #[error("target row {row} is not one-hot")]
    NotOneHot { row: usize },

    #[error("backward called on a variable that was not produced on this tape")]
    BackwardWithoutForward,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("layer {index}: {reason}")]
    LayerChain { index: usize, reason: String },

    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },

    #[error("modality {0} is required but was not provided")]
    MissingModality(u8),

    #[error("modality {0} was provided but the model does not consume it")]
    UnexpectedModality(u8),

    #[error("invalid modality index {0}, expected 1 or 2")]
    InvalidModality(u32),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match architecture: {0}")]
    CheckpointMismatch(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("class {class} has {count} samples, too few to stratify")]
    TooFewSamples { class: usize, count: usize },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u16 },

    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: String,
        expected: u64,
        actual: u64,
    },

    #[error("manifest {path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure category, used by the CLI to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. }
            | Error::WeightOutOfRange { .. }
            | Error::NonPositiveTemperature(_)
            | Error::InvalidModality(_) => ErrorKind::Config,
            Error::EmptySplit(_)
            | Error::TooFewSamples { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::Manifest { .. }
            | Error::Dataset(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Checkpoint(_)
            | Error::CheckpointMismatch(_)
            | Error::MissingModality(_)
            | Error::UnexpectedModality(_) => ErrorKind::Data,
            _ => ErrorKind::Runtime,
        }
    }
}
