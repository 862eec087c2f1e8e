//! Bayesian nonparametric estimation of principal and mediation effects
//! with several correlated mediators.

pub mod archive;
pub mod chain;
pub mod copula;
pub mod diagnostics;
pub mod distributions;
pub mod effects;
pub mod error;
pub mod imputation;
pub mod linalg;
pub mod marginal;
pub mod model;
pub mod outcome;
pub mod rng;
pub mod sensitivity;
pub mod simulation;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
