//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel larger than padded input: {0}")]
    KernelTooLarge(String),

    #[error("weight shape mismatch: {0}")]
    WeightShape(String),

    #[error("region is empty")]
    EmptyRegion,

    #[error("frame is fully masked and no neighbor field was provided")]
    FullyMasked,

    #[error("bad magic in {path}: {detail}")]
    BadMagic { path: String, detail: String },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: String, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("missing weight entry: {0}")]
    MissingWeight(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for CLI reporting: 2 bad input, 3 format error,
    /// 4 config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BadMagic { .. } | Error::Truncated { .. } | Error::Format { .. } => 3,
            Error::Config(_) => 4,
            _ => 2,
        }
    }
}
