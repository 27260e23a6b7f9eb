use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors produced by the compute core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A layer, stream or optimizer was configured inconsistently.
    Config(String),
    /// An index (joint, class, parameter) is out of range.
    Index { what: &'static str, index: usize, len: usize },
    /// A NaN or infinity was produced or supplied.
    NonFinite(&'static str),
    /// A joint subgraph is not connected.
    Disconnected(String),
    /// Input data violates a documented invariant.
    Data(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Index { what, index, len } => {
                write!(f, "{what} index {index} out of range (len {len})")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Disconnected(msg) => write!(f, "disconnected joint subgraph: {msg}"),
            Error::Data(msg) => write!(f, "invalid data: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;
