use thiserror::Error;

/// Errors raised by the metamodeling toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A hyperparameter or configuration value is outside its admissible domain.
    #[error("parameter out of domain: {0}")]
    Domain(String),

    /// Input data is malformed: shape mismatch, NaN, out-of-range coordinates.
    #[error("invalid input: {0}")]
    Input(String),

    /// A matrix factorization failed at the given parameters.
    #[error("ill-conditioned covariance at {params}: {reason}")]
    Conditioning { params: String, reason: String },

    /// A criterion is undefined for the supplied data, e.g. a zero standard deviation.
    #[error("undefined criterion: {0}")]
    Undefined(String),

    /// Every training restart diverged.
    #[error("training failed: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numbers rather than by the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Conditioning { .. } | Error::Training(_) | Error::Undefined(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
