use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("airspeed must be positive, got {0}")]
    InvalidAirspeed(f64),

    #[error("bank angle {0} is outside (-pi/2, pi/2)")]
    InvalidBankAngle(f64),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("edge is not controllable over the horizon (condition {0:.3e})")]
    Uncontrollable(f64),

    #[error("covariance target is infeasible: {0}")]
    Infeasible(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NotConverged { what: String, iterations: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid document at `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("unsupported schema version {found} (supported major version {supported})")]
    SchemaVersion { found: String, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors that indicate a numerical solver failure rather than bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_)
                | Error::Uncontrollable(_)
                | Error::Infeasible(_)
                | Error::NotConverged { .. }
        )
    }
}
