//! Error type shared by every module.

use thiserror::Error;

use crate::expr::ExprError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("invalid model: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("tilt too large for decay: no truncation radius up to {cap} meets tolerance {tol:e} at |p| = {p_norm}")]
    Truncation { p_norm: f64, tol: f64, cap: f64 },
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("grid too coarse: {0}")]
    Reducible(String),
    #[error("memory cap exceeded: {what} needs {needed} entries, cap is {cap}")]
    Capacity {
        what: &'static str,
        needed: usize,
        cap: usize,
    },
    #[error("effective matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("the bottom of the cell spectrum is essential (H = {h}, min a = {m}); correctors are undefined")]
    EssentialBottom { h: f64, m: f64 },
    #[error("maximizer of H stays on the search box boundary at p = {p:?} (box half-width {p_max})")]
    BoundaryMaximizer { p: Vec<f64>, p_max: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Whether the failure stems from user-supplied input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Expr(_) | Error::Validation(_) | Error::Config(_) | Error::InvalidArgument(_)
        )
    }
}
