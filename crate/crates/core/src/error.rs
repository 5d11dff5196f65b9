use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("design is rank deficient; dependent columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NonConvergence {
        iterations: usize,
        last_change: f64,
        last: Box<DMatrix<f64>>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("input error: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(context: &str, expected: (usize, usize), found: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        context: context.to_string(),
        expected,
        found,
    }
}
