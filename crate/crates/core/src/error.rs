use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    #[error("duplicate hotel id `{0}`")]
    DuplicateHotel(String),

    #[error("hotel `{hotel}`: {field} = {value} is out of range")]
    OutOfRange {
        hotel: String,
        field: &'static str,
        value: f64,
    },

    #[error("attribute `{0}` is not declared in the feature schema")]
    UnknownAttribute(String),

    #[error("feature `{feature}`: unknown category `{value}`")]
    UnknownCategory { feature: String, value: String },

    #[error("unknown hotel id `{0}`")]
    UnknownHotel(String),

    #[error("hotel index {index} out of range (vocabulary size {size})")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("{0}")]
    Invalid(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: u64, what: String },

    #[error("training diverged at step {step}: windowed loss {window_loss:.4} exceeds 10x initial loss {initial_loss:.4}")]
    Diverged {
        step: u64,
        window_loss: f64,
        initial_loss: f64,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad corpus file: {0}")]
    CorpusFile(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerical blow-up during optimization.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::NonFinite { .. })
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
