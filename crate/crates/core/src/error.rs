use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ClampError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ClampError {
    /// An input violated a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("value {value} outside valid range {range}")]
    Range { value: f64, range: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("schema error in {file}: {msg}")]
    Schema { file: String, msg: String },

    #[error("no contact detected: {0}")]
    NoContact(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value during {stage}: {diagnostics}")]
    NonFinite { stage: String, diagnostics: String },

    #[error("visual provider failure: {0}")]
    Provider(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ClampError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClampError::Io { path: path.into(), source }
    }

    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ClampError::Validation(_)
                | ClampError::Range { .. }
                | ClampError::Shape { .. }
                | ClampError::Parse { .. }
                | ClampError::Schema { .. }
                | ClampError::Empty(_)
        )
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> ClampError {
    ClampError::Validation(msg.into())
}
