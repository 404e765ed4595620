use thiserror::Error;

#[derive(Debug, Error)]
pub enum McocoError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {file} at element offset {offset}")]
    NonFinite { file: String, offset: usize },

    #[error("malformed file {file}: {reason}")]
    MalformedFile { file: String, reason: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("unsupported format version {0}")]
    FormatVersion(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl McocoError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        McocoError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, McocoError>;
