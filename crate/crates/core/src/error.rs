use thiserror::Error;

#[derive(Debug, Error)]
pub enum SnError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SnError>;
