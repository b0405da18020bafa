use thiserror::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the estimation pipeline.
///
/// Variants are grouped so a caller can map them onto a coarse taxonomy:
/// usage/configuration problems, data problems, and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    /// A cell of an input file failed to parse. Rows and columns are 1-based.
    #[error("parse error at row {row}, column {col}: {value:?} is not a non-negative integer")]
    Parse { row: usize, col: usize, value: String },

    /// Structurally malformed input (ragged rows, dimension mismatches).
    #[error("shape error: {0}")]
    Shape(String),

    /// Input violated a model invariant (bad category codes, non-PD matrix, ...).
    #[error("invalid data: {0}")]
    Validation(String),

    /// Inconsistent or out-of-range configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Numerical failure during estimation.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Gradient projection rotation failed to converge in any start.
    #[error("rotation did not converge in any start (best criterion {criterion:.6e})")]
    RotationNonConvergence {
        criterion: f64,
        best: Box<crate::rotation::RotationSolution>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that stem from the input data rather than the caller's
    /// configuration or a numerical failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Shape(_) | Error::Validation(_) | Error::Io(_) | Error::Json(_)
        )
    }

    pub fn is_numerical_error(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::RotationNonConvergence { .. })
    }
}
