use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: {details}")]
    ShapeMismatch {
        context: &'static str,
        details: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("batch statistics not populated: {0}")]
    MissingRunningStats(String),

    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn shape(context: &'static str, details: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            context,
            details: details.into(),
        }
    }
}
