//! Brute-force references: adaptive quadrature for truncated-Gaussian
//! functionals, the grid-marginalized exact posterior on tiny networks, and
//! Monte-Carlo fits of expected log-likelihood quadratics.

mod grid;
mod mc;
mod quad;

use thiserror::Error;

pub use grid::{grid_mmse, grid_mmse_nested, GridPosterior};
pub use mc::{mc_loglik_quadratic, QuadTarget, QuadraticFit};
pub use quad::{integrate, integrate_pieces, quad_moment, Functional};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("grid oracle supports at most 2 phase errors, got {0}")]
    TooManyPhases(usize),
    #[error("expected {expected} phase priors, got {got}")]
    PriorCount { expected: usize, got: usize },
    #[error("grid resolution {0} is below 2")]
    Resolution(usize),
    #[error("need at least 2 samples, got {0}")]
    Samples(usize),
    #[error("bus index {0} is not in the PMU's neighborhood")]
    NotInFragment(usize),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}
