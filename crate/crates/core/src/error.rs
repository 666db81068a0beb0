use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("zero-norm row {row} in l2_normalize_rows")]
    ZeroNormRow { row: usize },

    #[error("degenerate embedding: zero-norm row {row} before normalization")]
    DegenerateEmbedding { row: usize },

    #[error("backward called on a non-scalar tensor of shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("computation record already consumed by a previous backward pass")]
    RecordConsumed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("oracle size limit: list length {len} exceeds {max}")]
    OracleSizeLimit { len: usize, max: usize },

    #[error("divergence at step {step}: {what} is not finite")]
    Divergence { step: u64, what: &'static str },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { expected: u16, found: u16 },

    #[error("truncated {what}")]
    Truncated { what: &'static str },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
