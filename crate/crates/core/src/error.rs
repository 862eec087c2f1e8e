use thiserror::Error;

/// Errors raised by the modelling engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("incompatible within-arm correlations and rho = {rho}: constrained matrix is not positive definite")]
    IncompatibleCorrelation { rho: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("dataset is invalid:\n{}", .0.join("\n"))]
    InvalidDataset(Vec<String>),

    #[error("outcome model degenerate: {n_units} units cannot support a {dim}-dimensional covariance")]
    OutcomeDegenerate { n_units: usize, dim: usize },

    #[error("rank-deficient design matrix in {context}")]
    RankDeficient { context: &'static str },

    #[error("predictive density is zero at observation {index}")]
    ZeroPredictiveDensity { index: usize },

    #[error("{module} failed at iteration {iteration}: {source}")]
    Chain {
        module: &'static str,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("draw archive: {0}")]
    Archive(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
