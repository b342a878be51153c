use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(&'static str),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("insufficient replications: need at least 2, got {0}")]
    InsufficientReplications(usize),

    #[error("singular likelihood variance at x = {0}")]
    SingularVariance(f64),

    #[error("singular log-homotopy hessian ({0})")]
    SingularHessian(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("observation path has length {got}, expected {expected}")]
    PathLength { expected: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParams(_) => "invalid_params",
            Error::DegenerateWeights(_) => "degenerate_weights",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::InsufficientReplications(_) => "insufficient_replications",
            Error::SingularVariance(_) => "singular_variance",
            Error::SingularHessian(_) => "singular_hessian",
            Error::NonFinite(_) => "non_finite",
            Error::PathLength { .. } => "path_length",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
        }
    }
}
