use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {dimension}: expected {expected}, got {actual}")]
    Shape {
        dimension: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index {index} out of range for {what} of length {len}")]
    Bounds {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("{0}; round the relaxed parameters to a discrete edit first")]
    Mode(String),

    #[error("no candidate edits remain")]
    Exhausted,

    #[error("unsupported layer `{kind}`: {reason}")]
    UnsupportedLayer { kind: String, reason: String },

    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("weight count mismatch: manifest declares {expected} values, blob holds {actual}")]
    WeightCount { expected: usize, actual: usize },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("malformed IDX data at byte offset {offset}: {message}")]
    Idx { offset: usize, message: String },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    Count { images: usize, labels: usize },

    #[error("training diverged at step {step}: loss is {loss}")]
    Training { step: usize, loss: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Bounds { .. } => "bounds",
            Error::InvalidValue(_) => "invalid-value",
            Error::Mode(_) => "mode",
            Error::Exhausted => "exhausted",
            Error::UnsupportedLayer { .. } => "unsupported-layer",
            Error::Format { .. } => "format",
            Error::WeightCount { .. } => "weight-count",
            Error::Version { .. } => "version",
            Error::Idx { .. } => "idx-format",
            Error::Count { .. } => "count",
            Error::Training { .. } => "training",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}
