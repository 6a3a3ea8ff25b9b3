//! Varying-coefficient stochastic differential equations: SDE parameters
//! modelled as link-transformed sums of fixed effects, random intercepts and
//! penalised spline smooths, fitted by Laplace-approximate marginal
//! likelihood.

pub mod autodiff;
pub mod basis;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod kalman;
pub mod linalg;
pub mod sde;
pub mod sim;

pub use error::{Error, Result};
