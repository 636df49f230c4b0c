use std::io;

use thiserror::Error;

/// Errors raised while reading or writing the binary `RDA1`/`RDAM` files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u8, found: u8 },
    #[error("truncated payload: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { needed: usize, offset: usize, len: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum RadaError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("size limit exceeded: {0}")]
    Size(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl RadaError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        RadaError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// I/O failures are distinguished from contract/config failures at the
    /// process boundary.
    pub fn is_io(&self) -> bool {
        matches!(self, RadaError::Io(_))
    }
}

pub type Result<T, E = RadaError> = std::result::Result<T, E>;
