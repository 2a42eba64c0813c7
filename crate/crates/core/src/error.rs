use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("non-uniform sampling: max time-step deviation {deviation:.3e} exceeds 1% of median step {median:.3e}")]
    NonUniformSampling { median: f64, deviation: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("incompatible trace set: {0}")]
    IncompatibleSet(String),

    #[error("insufficient executions: need at least {needed}, got {got}")]
    InsufficientExecutions { needed: usize, got: usize },

    #[error("degenerate trace (zero variance) for execution {execution_id}")]
    DegenerateTrace { execution_id: usize },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible spectrograms: {0}")]
    IncompatibleSpectrogram(String),

    #[error("insufficient batch: stability needs at least 2 spectrograms, got {0}")]
    InsufficientBatch(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model-order selection failed: every candidate order was excluded")]
    SelectionFailure,

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document: {0}")]
    Malformed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::InsufficientExecutions { .. }
            | Error::InsufficientBatch(_)
            | Error::InsufficientData(_) => 4,
            Error::Numerical(_) | Error::SelectionFailure => 5,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
