use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UbotError {
    /// Bad or inconsistent configuration; `field` is a dotted path into the config.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] ubot_core::Error),
}

impl UbotError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        UbotError::Config { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UbotError::Io { path: path.into(), source }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, UbotError::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, UbotError>;
