use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("row {row}, column '{column}': {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("covariate '{0}' is constant over the pooled sample")]
    ConstantCovariate(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("density of arm '{arm}' is zero or non-finite at the evaluation point")]
    DensityNotPositive { arm: String },

    #[error("missing score for unit '{0}'")]
    MissingScore(String),

    #[error("missing response for matched unit '{0}'")]
    MissingResponse(String),

    #[error("nothing matched")]
    NothingMatched,

    #[error("logit fit did not converge: {0}; try a larger ridge penalty")]
    NonConvergence(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the failure stems from bad input (as opposed to a numeric
    /// breakdown during fitting or solving).
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::NonConvergence(_)
                | Error::Singular(_)
                | Error::Numeric(_)
                | Error::DensityNotPositive { .. }
                | Error::NothingMatched
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
