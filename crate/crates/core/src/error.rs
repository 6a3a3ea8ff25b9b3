use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate covariate '{0}': all values are equal")]
    DegenerateCovariate(String),
    #[error("unknown name '{0}'")]
    UnknownName(String),
    #[error("grouping factor '{0}' must have at least two levels")]
    DegenerateFactor(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("numerical degeneracy at step {step}: {reason}")]
    NumericalDegeneracy { step: usize, reason: String },
    #[error("inner optimisation failed to converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    InnerFailure {
        iterations: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },
    #[error("matrix is not positive definite: {0}; consider a ridge repair of the precision matrix")]
    NotPositiveDefinite(String),
    #[error("{0}")]
    UnsupportedFamily(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error on '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by bad user input (files, configuration, names),
    /// as opposed to numerical failures during estimation.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::UnknownName(_)
                | Error::DegenerateFactor(_)
                | Error::DegenerateCovariate(_)
                | Error::Data(_)
                | Error::DegenerateData(_)
                | Error::UnsupportedFamily(_)
                | Error::Config(_)
                | Error::Io { .. }
                | Error::Dimension(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
