use std::path::{Path, PathBuf};

use dap_core::DapError;
use thiserror::Error;

pub type AppResult<T> = Result<T, AppError>;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("{path}: {message}")]
    FormatAt { path: PathBuf, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png: {0}")]
    Png(#[from] png::EncodingError),
    #[error(transparent)]
    Core(#[from] DapError),
}

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Attaches a file path to a format error.
    pub fn at(self, path: &Path) -> Self {
        match self {
            Self::Format(message) => Self::FormatAt { path: path.to_path_buf(), message },
            other => other,
        }
    }

    /// 1 for anything the user can fix by changing arguments or config, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Core(DapError::Config(_)) => 1,
            _ => 2,
        }
    }
}
