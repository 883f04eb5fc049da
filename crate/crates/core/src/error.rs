use std::path::PathBuf;

/// Error type shared by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("not found: {0}")]
    NotFound(PathBuf),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("malformed FITS header: {0}")]
    MalformedHeader(String),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("sampler error: {0}")]
    Sampler(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("join error, ids missing from one side: {0:?}")]
    Join(Vec<String>),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unknown id: {0}")]
    UnknownId(String),
    #[error("split invariant violated: {0}")]
    Split(String),
    #[error("invalid cache: {0}")]
    InvalidCache(String),
    #[error("training already in progress")]
    Busy,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Decode(other.to_string()),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        Error::Parse {
            line,
            message: e.to_string(),
        }
    }
}
