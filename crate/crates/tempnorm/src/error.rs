use thiserror::Error;

/// Errors from the normalization, simulation, feature, and evaluation layers.
#[derive(Debug, Error)]
pub enum TempNormError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("undefined UAR: {0}")]
    UndefinedUar(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("at index {0}: {1}")]
    AtIndex(usize, Box<TempNormError>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
