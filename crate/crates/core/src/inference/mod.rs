//! Penalized likelihood, Laplace-approximate marginal likelihood and model
//! fitting.

mod engine;
mod fit;
mod objective;
mod optim;
mod spec;

pub use fit::{
    fit, fit_from, fit_objective, marginal_aic, posterior_samples, predict_parameters,
    predict_with_draws, FitResult, ParameterCurve, PredictOptions, StartValues,
    LOG_LAMBDA_BOUNDS,
};
pub use objective::{InnerMode, JointObjective, DEGENERATE_EIGEN, RIDGE};
pub use spec::{ModelSpec, OptimizerSettings, Prior};
