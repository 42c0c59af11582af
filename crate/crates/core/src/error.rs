use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("precision error: {0}")]
    Precision(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric fault (non-finite value) in {location}")]
    NumericFault { location: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("data not found: {what} (searched {})", path.display())]
    DataNotFound { what: String, path: PathBuf },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
