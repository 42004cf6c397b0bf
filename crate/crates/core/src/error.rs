use std::fmt;

/// Library-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    Shape(String),
    /// A forward or backward pass produced NaN or infinity.
    Numeric(String),
    /// Manifest, label, or config content failed to parse.
    Parse(String),
    /// Image file unreadable or in an unsupported encoding.
    UnsupportedFormat(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Checkpoint bytes do not match the expected format.
    Format(String),
    /// Invalid configuration or argument value.
    Config(String),
    /// Training loss became non-finite at the given epoch.
    Divergence { epoch: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::UnsupportedFormat(msg) => write!(f, "unsupported format: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Divergence { epoch } => {
                write!(f, "training diverged: non-finite loss at epoch {epoch}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
