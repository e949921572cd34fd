use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum QkdError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("unsupported version tag {0:?}")]
    Version(String),
    #[error("degenerate task aggregation: norm {0:e}")]
    DegenerateTask(f64),
    #[error("size error: {0}")]
    Size(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QkdError {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        QkdError::Format {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, QkdError>;
