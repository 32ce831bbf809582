//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by the runtime, containers, collectives and solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (device counts, group bounds, topology files).
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse: unknown rank, rank without a segment, index out of range.
    #[error("usage error: {0}")]
    Usage(String),

    /// Device arena exhausted at container creation.
    #[error("allocation failure on device {rank}: requested {requested} bytes, {available} available")]
    Alloc {
        rank: usize,
        requested: usize,
        available: usize,
    },

    /// Container shapes or segmentations do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Split policy cannot be realized for the requested length.
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    /// Operation is outside what the transfer model supports.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A device command panicked; reported when its fence is waited on.
    #[error("device {rank} command failed: {message}")]
    Task { rank: usize, message: String },

    /// Numerical abort (divergence guard, CG breakdown escalated by a caller).
    #[error("numerical abort: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
