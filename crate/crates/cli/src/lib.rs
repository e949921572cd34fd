//! Experiment harness around `qkd-core`, writing JSON and CSV reports.

pub mod config;
pub mod experiments;
pub mod report;

use qkd_core::QkdError;

/// Harness failure, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Runtime(_) => 4,
        }
    }
}

impl From<QkdError> for HarnessError {
    fn from(e: QkdError) -> Self {
        match e {
            QkdError::Config(m) | QkdError::Argument(m) => Self::Config(m),
            QkdError::Data(m) => Self::Data(m),
            e @ (QkdError::Format { .. }
            | QkdError::Version(_)
            | QkdError::Size(_)
            | QkdError::DegenerateTask(_)
            | QkdError::Generation(_)) => Self::Data(e.to_string()),
            e @ (QkdError::Index(_) | QkdError::State(_) | QkdError::Io(_)) => Self::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}
