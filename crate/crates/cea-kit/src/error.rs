use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CeaError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, CeaError>;

impl CeaError {
    /// Process exit code for the CLI: 2 for usage/config, 3 for runtime numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CeaError::Config(_) | CeaError::Shape(_) => 2,
            CeaError::Numeric(_) => 3,
            _ => 3,
        }
    }
}
