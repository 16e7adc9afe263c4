use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("state error: {0}")]
    State(String),
    #[error("key error: {0}")]
    Key(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("version mismatch: {0}")]
    Version(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("subprocess error: {0}")]
    Subprocess(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short identifier, used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Range(_) => "range",
            Error::Argument(_) => "argument",
            Error::Format(_) => "format",
            Error::Lookup(_) => "lookup",
            Error::Length(_) => "length",
            Error::State(_) => "state",
            Error::Key(_) => "key",
            Error::Integrity(_) => "integrity",
            Error::Version(_) => "version",
            Error::Load(_) => "load",
            Error::Manifest(_) => "manifest",
            Error::NonFinite(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Subprocess(_) => "subprocess",
            Error::Tensor(_) => "tensor",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
