use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The pullback metric at `theta` is singular (or numerically so).
    #[error("singular metric at theta = {theta:?}")]
    SingularMetric { theta: Vec<f64> },

    #[error("degenerate compactness (c = {0})")]
    DegenerateCompactness(f64),

    #[error("{0} is not available for this model")]
    NotAvailable(&'static str),

    #[error("covariance factorization failed: {0}")]
    Factorization(String),

    #[error("prior has negligible mass over the weighted samples")]
    DegeneratePrior,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::SingularMetric { .. }
                | Error::DegenerateCompactness(_)
                | Error::Factorization(_)
                | Error::DegeneratePrior
                | Error::Numeric(_)
        )
    }

    /// Process exit code: 3 for numeric failures, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_numeric() {
            3
        } else {
            2
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
