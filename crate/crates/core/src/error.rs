use thiserror::Error;

/// Errors raised by the inference engine and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error(
        "local optimizer did not converge after {iterations} iterations \
         (gradient norm {grad_norm:.3e}, best iterate {best:?})"
    )]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        best: Vec<f64>,
    },

    #[error(
        "fit diverged at iteration {iteration}: {reason}; try different initial values \
         or switch to another local backend (laplace or slr)"
    )]
    Divergence { iteration: usize, reason: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("incompatible file version: found {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
