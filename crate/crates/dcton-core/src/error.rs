//! Crate-wide error type.

use std::path::PathBuf;

use crate::losses::LossReport;

/// Errors produced by geometry, I/O, training and evaluation routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed inconsistent shapes, sizes or values.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A linear system had no usable solution (degenerate control points,
    /// rank-deficient transform stack, and similar).
    #[error("singular system: {0}")]
    SingularSystem(String),

    /// A required file or directory does not exist.
    #[error("not found: {}", path.display())]
    NotFound { path: PathBuf },

    /// A file exists but its contents are not what the format requires.
    #[error("format error in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training produced a non-finite loss; carries the last report.
    #[error("training diverged at iteration {}", report.iteration)]
    Diverged { report: LossReport },
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
