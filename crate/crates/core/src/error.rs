use thiserror::Error;

/// Errors raised by model construction, fitting and evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate weights at t = {t}: every kernel value is below 1e-300")]
    DegenerateWeights { t: f64 },

    #[error("basis {basis} receives zero total weight from the observations")]
    ZeroBasisWeight { basis: usize },

    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("singular system ({context})")]
    Singular { context: String },

    #[error("non-finite value encountered ({context})")]
    NonFinite { context: String },

    #[error("every split failed for K = {k}")]
    AllSplitsFailed { k: usize },

    #[error("numerical failure at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        match self {
            Error::AtIteration { .. } => self,
            other => Error::AtIteration {
                iteration,
                source: Box::new(other),
            },
        }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::Singular { .. }
            | Error::NonFinite { .. }
            | Error::DegenerateWeights { .. }
            | Error::ZeroBasisWeight { .. }
            | Error::AllSplitsFailed { .. } => true,
            Error::AtIteration { source, .. } => source.is_numeric(),
            Error::InvalidInput(_) | Error::DimensionMismatch(_) => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
