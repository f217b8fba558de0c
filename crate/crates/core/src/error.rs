use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate norm in row {row} of {op}")]
    DegenerateNorm { op: &'static str, row: usize },

    #[error("missing gradient for parameter `{name}`")]
    MissingGradient { name: String },

    #[error("parameter structure mismatch at `{path}`: {reason}")]
    StructureMismatch { path: String, reason: String },

    #[error("parse error in {path} at offset {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("insufficient samples for class {class}: need {needed}, have {available}")]
    InsufficientSamples {
        class: u32,
        needed: usize,
        available: usize,
    },

    #[error("no valid pixels")]
    NoValidPixels,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable short tag used by the CLI when rendering errors as JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateNorm { .. } => "degenerate_norm",
            Error::MissingGradient { .. } => "missing_gradient",
            Error::StructureMismatch { .. } => "structure_mismatch",
            Error::Parse { .. } => "parse",
            Error::Config { .. } => "config",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::NoValidPixels => "no_valid_pixels",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
