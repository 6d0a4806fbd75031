use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HerlError>;

#[derive(Debug, Error)]
pub enum HerlError {
    #[error("point outside the ball: c*|x|^2 = {value} (limit {limit})")]
    BoundaryViolation { value: f64, limit: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("curvature mismatch: {left} vs {right}")]
    CurvatureMismatch { left: f64, right: f64 },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("angle undefined for a zero vector in {0}")]
    ZeroVector(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("embedding depth limit: {0}")]
    DepthLimit(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("autodiff: {0}")]
    Graph(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HerlError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        HerlError::InvalidConfig(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HerlError::Io {
            path: path.into(),
            source,
        }
    }
}
