//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("Carleman overflow guard violated: {0}")]
    OverflowGuard(String),

    #[error("boundary compatibility violated: {0}")]
    BoundaryCompat(String),

    #[error("ellipticity violated at node {node}: eigenvalue {eig} outside [{mu1}, {mu2}]")]
    Ellipticity {
        node: usize,
        eig: f64,
        mu1: f64,
        mu2: f64,
    },

    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    #[error("iteration diverged: {0}")]
    Divergence(String),

    #[error("did not converge within {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
