use thiserror::Error;

/// Errors raised by the model, solvers, iterations and estimators.
#[derive(Debug, Error)]
pub enum LqcError {
    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    Dimension {
        field: String,
        expected: String,
        found: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid mismatch: {0}")]
    Grid(String),

    #[error("matrix is not PSD (min eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },

    #[error("matrix is not positive definite (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite { min_eig: f64 },

    #[error("strong regularity lost at t = {t}: min eigenvalue {min_eig:e}")]
    StrongRegularityLost { t: f64, min_eig: f64 },

    #[error("covariance lost PSD at t = {t} (min eigenvalue {min_eig:e}); the grid is too coarse")]
    CovarianceLostPsd { t: f64, min_eig: f64 },

    #[error("singular {what} at t = {t} (min eigenvalue {min_eig:e})")]
    Singular {
        what: &'static str,
        t: f64,
        min_eig: f64,
    },

    #[error("non-finite value in {what} at t = {t}")]
    NonFinite { what: &'static str, t: f64 },

    #[error("perturbed covariance is not positive definite; shrink h")]
    ShrinkStep,

    #[error("policy gradient run aborted at iteration {iteration}: {reason}")]
    PgAborted {
        iteration: usize,
        reason: String,
        record: Box<crate::pg::RunRecord>,
    },
}

pub type Result<T> = std::result::Result<T, LqcError>;

pub(crate) fn dim_err(field: impl Into<String>, expected: (usize, usize), found: (usize, usize)) -> LqcError {
    LqcError::Dimension {
        field: field.into(),
        expected: format!("{}x{}", expected.0, expected.1),
        found: format!("{}x{}", found.0, found.1),
    }
}
