//! Error type shared by every pipeline operation.

use thiserror::Error;

/// Errors produced by store I/O and pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unknown dtype tag '{0}'")]
    UnknownDtype(String),

    #[error("tensor '{0}' not found")]
    UnknownTensor(String),

    #[error("duplicate tensor name '{0}'")]
    DuplicateTensor(String),

    #[error("tensor '{name}': value count {got} does not match shape {shape:?} ({expected} elements)")]
    CountMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("tensor '{name}': shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("stores are misaligned: tensor '{name}' is missing from the {side} store")]
    Misaligned { name: String, side: String },

    #[error("tensor '{name}': non-finite value at flat index {index}")]
    NonFinite { name: String, index: u64 },

    #[error("tensor '{name}': value {value} at flat index {index} is not encodable as {dtype}")]
    Unencodable {
        name: String,
        index: u64,
        value: f32,
        dtype: String,
    },

    #[error("tensor '{0}' has integer dtype; operation requires floating-point data")]
    NotFloat(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed pattern '{pattern}': {reason}")]
    MalformedPattern { pattern: String, reason: String },

    #[error("malformed mask file: {0}")]
    MalformedMask(String),

    #[error("zero-norm operand for cosine similarity on tensor '{0}'")]
    ZeroNorm(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged: loss is non-finite at step {0}")]
    Diverged(usize),
}

impl Error {
    /// Wrap an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
