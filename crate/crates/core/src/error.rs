use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum DuetError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at data row {row}, column {col}: {detail}")]
    Parse {
        row: usize,
        col: usize,
        detail: String,
    },
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("range of length {len} yields no windows for lookback {lookback} and horizon {horizon}")]
    NoWindows {
        len: usize,
        lookback: usize,
        horizon: usize,
    },
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },
    #[error("top-k of {k} is outside 1..={experts}")]
    InvalidK { k: usize, experts: usize },
    #[error("moving-average kernel {kernel} must be odd and within 1..={max}")]
    InvalidKernel { kernel: usize, max: usize },
    #[error("unknown extractor {id} (cluster has {experts})")]
    UnknownExtractor { id: usize, experts: usize },
    #[error("series of length {0} is too short for a frequency projection")]
    SeriesTooShort(usize),
    #[error("distance matrix is asymmetric (max deviation {0:e})")]
    AsymmetricDistance(f64),
    #[error("mask row {0} has no live entry")]
    DeadRow(usize),
    #[error("window {index} is out of range ({count} windows)")]
    WindowOutOfRange { index: usize, count: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: u64, loss: f64 },
    #[error("empty set: {0}")]
    EmptySet(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("loss is not deterministic: {first} vs {second} at identical parameters")]
    NonDeterministicLoss { first: f64, second: f64 },
}

pub type Result<T, E = DuetError> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(
    context: impl Into<String>,
    expected: impl std::fmt::Debug,
    found: impl std::fmt::Debug,
) -> DuetError {
    DuetError::ShapeMismatch {
        context: context.into(),
        expected: format!("{expected:?}"),
        found: format!("{found:?}"),
    }
}
