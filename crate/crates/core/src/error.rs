use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid return {value} (simple returns cannot fall below -100%)")]
    InvalidReturn { value: f64 },

    #[error("invalid return {value} at position {position}")]
    InvalidReturnAt { position: usize, value: f64 },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for size {bound}")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("context length {len} exceeds block size {block_size}")]
    ContextLength { len: usize, block_size: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("no stock has enough observations for a window of {needed}")]
    EmptyUniverse { needed: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular design matrix ({0})")]
    SingularDesign(String),

    #[error("date alignment failed; {count} dates missing, e.g. {examples}")]
    Join { count: usize, examples: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("bad checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is truncated while reading {0}")]
    CheckpointTruncated(&'static str),

    #[error("checkpoint tensor {name} has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::ContextLength { .. } => 1,
            Error::NumericDomain(_)
            | Error::Divergence { .. }
            | Error::SingularDesign(_)
            | Error::ShapeMismatch { .. } => 3,
            _ => 2,
        }
    }
}
