use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A NaN or infinity was produced or consumed.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A caller broke an API precondition (e.g. backward from a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid hyperparameters or run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset content problems: too few volumes, bad labels, undersized volumes.
    #[error("data error: {0}")]
    Data(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("payload length mismatch in {path}: header implies {expected} bytes, found {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),

    #[error("malformed header in {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    /// Metric is not defined for the given inputs (e.g. empty foreground).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Statistical test has no meaningful answer (e.g. zero-variance differences).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    /// True for failures caused by NaN/Inf or optimizer divergence.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged(_))
    }

    /// True for failures caused by input files or dataset content.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Data(_)
                | Error::BadMagic { .. }
                | Error::LengthMismatch { .. }
                | Error::UnknownDtype(_)
                | Error::Header { .. }
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::UndefinedMetric(_)
        )
    }
}
