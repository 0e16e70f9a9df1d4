//! Crate-wide error type and exit-code categories.

use thiserror::Error;

/// How an error maps onto a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Malformed command-line usage (exit code 1).
    Usage,
    /// Invalid data, file contents, or argument semantics (exit code 2).
    Data,
    /// Numerical failure: divergence, non-finite values, degenerate swarms (exit code 3).
    Numerical,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Numerical => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),

    #[error("model `{model}` is missing from the ranked values")]
    MissingModel { model: String },

    #[error("model `{model}` appears more than once")]
    DuplicateModel { model: String },

    #[error("model `{model}` is not part of the model order")]
    UnknownModel { model: String },

    #[error("ranking vectors have mismatched lengths: {left} vs {right}")]
    RankLengthMismatch { left: usize, right: usize },

    #[error("dataset `{dataset}` has no category label")]
    MissingCategory { dataset: String },

    #[error("no distance recorded for dataset pair `{a}` / `{b}`")]
    MissingDistance { a: String, b: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("integration diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("covariance matrix is not positive semi-definite (pivot {pivot} at row {row})")]
    NotPositiveSemiDefinite { row: usize, pivot: f64 },

    #[error("every particle evaluated to a non-finite cost after initialization")]
    AllInfiniteSwarm,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("non-finite loss at epoch {epoch} for config `{config_id}`")]
    NonFiniteLoss { config_id: String, epoch: usize },

    #[error("snapshot for config `{config_id}` epoch {epoch}: {source}")]
    Snapshot {
        config_id: String,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("relative metrics are undefined for a zero target (row {row})")]
    ZeroTarget { row: usize },

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: Box<serde_json::Error>,
    },

    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: Box<csv::Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Usage(_) => ErrorCategory::Usage,
            Error::Divergence { .. }
            | Error::NotPositiveSemiDefinite { .. }
            | Error::AllInfiniteSwarm
            | Error::NonFinite(_)
            | Error::NonFiniteLoss { .. } => ErrorCategory::Numerical,
            Error::Snapshot { source, .. } | Error::Stage { source, .. } => source.category(),
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
