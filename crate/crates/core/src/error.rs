//! Crate-wide error type. One enum so CLI exit codes can be mapped per class.

use std::fmt;
use std::io;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// Tensor operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation was called with arguments outside its contract.
    InvalidArgument { op: &'static str, msg: String },
    /// Model configuration violates an invariant.
    Config(String),
    /// A dataset or on-disk artifact does not follow its format.
    DataFormat {
        source: PathBuf,
        offset: Option<u64>,
        reason: String,
    },
    /// Checkpoint file is malformed or incompatible.
    Checkpoint(String),
    /// A loaded parameter does not match the model that is loading it.
    ParamMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A non-finite value surfaced where finite math was required.
    NonFinite { context: String },
    EmptyDataset,
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} vs {rhs:?}")
            }
            Error::InvalidArgument { op, msg } => write!(f, "{op}: {msg}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::DataFormat {
                source,
                offset,
                reason,
            } => match offset {
                Some(off) => write!(
                    f,
                    "bad data in {} at byte offset {off}: {reason}",
                    source.display()
                ),
                None => write!(f, "bad data in {}: {reason}", source.display()),
            },
            Error::Checkpoint(msg) => write!(f, "bad checkpoint: {msg}"),
            Error::ParamMismatch {
                name,
                expected,
                found,
            } => write!(
                f,
                "parameter `{name}`: expected shape {expected:?}, found {found:?}"
            ),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::EmptyDataset => write!(f, "dataset is empty"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
