use std::io;

use thiserror::Error;

pub type Result<T, E = LscError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LscError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error(
        "enumeration bound {max_norm} yields {available} canonical frequencies but {needed} are \
         required; use max_norm >= {required}"
    )]
    InsufficientBound {
        max_norm: u32,
        available: usize,
        needed: usize,
        required: u32,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature grid has {points} points, above the limit of {limit}")]
    GridTooLarge { points: u128, limit: usize },

    #[error("non-finite value in {context} at iteration {iteration}")]
    NonFinite {
        context: &'static str,
        iteration: usize,
    },

    #[error("retraction failed: W + X is rank deficient")]
    RankDeficient,

    #[error("dictionary atom {0} has vanishing norm")]
    DegenerateAtom(usize),

    #[error("image {0} has vanishing norm and cannot be normalized")]
    ZeroImage(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unexpected magic {found:#010x} at byte offset 0 (expected {expected:#010x})")]
    IdxMagic { found: u32, expected: u32 },

    #[error("truncated payload at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("bad magic in checkpoint header")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    VersionMismatch { found: u16, supported: u16 },

    #[error("{0}")]
    InvariantViolation(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl LscError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        LscError::InvalidArgument(msg.into())
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(LscError::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
