use std::path::PathBuf;

/// Errors raised anywhere in the probing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corruption detected in {path}: {detail}")]
    Corruption { path: PathBuf, detail: String },
    #[error("build error: {0}")]
    Build(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
