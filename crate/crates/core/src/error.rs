use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. Each variant carries enough context to
/// point at the offending input without a debugger.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("batch norm in train mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("row {row} has norm {norm:e}, below the normalization guard")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("backward already ran on this graph; call reset_grads() first")]
    BackwardAlreadyRun,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("strata too small to cover every split: {0:?}")]
    StrataTooSmall(Vec<String>),

    #[error("class {0:?} has no records")]
    EmptyClass(String),

    #[error("class {class:?} has {have} patterns, need at least {need}")]
    ClassTooSmall { class: String, have: usize, need: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("unknown frame id {0}")]
    UnknownFrame(u64),

    #[error("service not ready: {0}")]
    NotReady(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
