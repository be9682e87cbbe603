use thiserror::Error;

pub type Result<T> = std::result::Result<T, PolarError>;

#[derive(Debug, Error)]
pub enum PolarError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("value {value} outside domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid action {action} at stage {stage} ({n_actions} actions available)")]
    InvalidAction {
        stage: usize,
        action: usize,
        n_actions: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PolarError {
    /// Wraps a numerical error with the location it occurred at.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            PolarError::Numerical(msg) => PolarError::Numerical(format!("{ctx}: {msg}")),
            other => other,
        }
    }
}
