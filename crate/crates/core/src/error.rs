//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameter or configuration value. The message names the field.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Two fields that must share a grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A field contains NaN or infinity; the message identifies the voxel.
    #[error("non-finite value in {op} at voxel {voxel}")]
    NonFinite { op: &'static str, voxel: usize },

    /// Conjugate gradients did not reach the requested residual.
    #[error("CG did not converge within {iters} iterations (relative residual {residual:.3e})")]
    CgDidNotConverge { iters: usize, residual: f64 },

    /// A voxel tensor failed the positive-semidefinite requirement.
    #[error("tensor at voxel {voxel} is not positive semi-definite (min eigenvalue {min_eig:.3e})")]
    NotPsd { voxel: usize, min_eig: f64 },

    /// Scalar Hessian block too close to zero to invert.
    #[error("singular scalar Hessian block: |H_kk| = {0:.3e}")]
    SingularHkk(f64),

    /// Line search could not produce a decrease.
    #[error("line search failed: {0}")]
    LineSearchFailed(String),

    /// Malformed or unreadable volume file.
    #[error("bad volume: {0}")]
    BadVolume(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
