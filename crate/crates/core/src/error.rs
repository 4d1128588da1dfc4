//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor construction, fitting, and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions {dims:?}: need at least 2 modes, every extent >= 1")]
    InvalidDims { dims: Vec<usize> },

    #[error("value buffer has length {got}, expected {expected} for dims {dims:?}")]
    ValueLength {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("index {index:?} out of range for dims {dims:?}")]
    IndexOutOfRange { index: Vec<usize>, dims: Vec<usize> },

    #[error("duplicate multi-index {index:?}")]
    DuplicateIndex { index: Vec<usize> },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("empty entry set where at least {min} entries are required")]
    TooFewEntries { min: usize },

    #[error("observed values are constant; cannot normalize to unit variance")]
    ConstantInput,

    #[error("train fraction {0} outside (0, 1]")]
    InvalidTrainFraction(f64),

    #[error("rank must be >= 1, got {0}")]
    InvalidRank(usize),

    #[error("hidden width must be >= 1, got {0}")]
    InvalidHiddenWidth(usize),

    #[error("noise standard deviation must be finite and >= 0, got {0}")]
    InvalidNoiseStd(f64),

    #[error("factor matrices disagree on column count: {0:?}")]
    MismatchedRank(Vec<usize>),

    #[error("factor row counts {factor_dims:?} do not match tensor dims {dims:?}")]
    MismatchedDims {
        factor_dims: Vec<usize>,
        dims: Vec<usize>,
    },

    #[error("step size must be > 0, got {0}")]
    InvalidStepSize(f64),

    #[error("parameter count must be >= 1")]
    EmptyParameterVector,

    #[error("non-finite gradient at coordinate {coordinate}")]
    NonFiniteGradient { coordinate: usize },

    #[error("non-finite {quantity} while processing entry {index:?} (batch position {position})")]
    NonFiniteEntry {
        quantity: &'static str,
        index: Vec<usize>,
        position: usize,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("training step {step}: {source}")]
    TrainingStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("monte carlo sample count must be >= 1")]
    InvalidSampleCount,

    #[error("total observed count {total} smaller than batch size {batch}")]
    TotalSmallerThanBatch { total: usize, batch: usize },

    #[error("batch size {batch} exceeds training set size {train}")]
    BatchTooLarge { batch: usize, train: usize },

    #[error("{path}:{line}: malformed header: {reason}")]
    CooHeader {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("{path}:{line}: malformed entry: {reason}")]
    CooEntry {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("{path}:{line}: index {index:?} out of range for dims {dims:?}")]
    CooIndexOutOfRange {
        path: String,
        line: usize,
        index: Vec<usize>,
        dims: Vec<usize>,
    },

    #[error("{path}:{line}: duplicate index {index:?}")]
    CooDuplicateIndex {
        path: String,
        line: usize,
        index: Vec<usize>,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category slug, used by the CLI for exit
    /// reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidDims { .. }
            | Error::ValueLength { .. }
            | Error::IndexOutOfRange { .. }
            | Error::DuplicateIndex { .. }
            | Error::LengthMismatch { .. }
            | Error::TooFewEntries { .. }
            | Error::ConstantInput => "data",
            Error::InvalidTrainFraction(_)
            | Error::InvalidRank(_)
            | Error::InvalidHiddenWidth(_)
            | Error::InvalidNoiseStd(_)
            | Error::InvalidStepSize(_)
            | Error::EmptyParameterVector
            | Error::InvalidSampleCount
            | Error::TotalSmallerThanBatch { .. }
            | Error::BatchTooLarge { .. }
            | Error::InvalidConfig(_) => "config",
            Error::MismatchedRank(_) | Error::MismatchedDims { .. } => "shape",
            Error::NonFiniteGradient { .. }
            | Error::NonFiniteEntry { .. }
            | Error::NonFiniteLoss { .. }
            | Error::TrainingStep { .. } => "numeric",
            Error::CooHeader { .. }
            | Error::CooEntry { .. }
            | Error::CooIndexOutOfRange { .. }
            | Error::CooDuplicateIndex { .. } => "coo-parse",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
