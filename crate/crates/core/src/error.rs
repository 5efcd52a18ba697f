use std::fmt;

/// Errors raised anywhere in the core library.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A non-finite value was produced or consumed.
    Numeric { op: &'static str, detail: String },
    /// A documented precondition was violated by the caller.
    Contract(String),
    /// Invalid configuration; the message names the offending field.
    Config(String),
    /// Malformed file contents.
    Format(String),
    Io(std::io::Error),
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "dimension error in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::Numeric { op, detail } => write!(f, "non-finite value in {op}: {detail}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
            Error::Diverged { epoch, detail } => {
                write!(f, "training diverged at epoch {epoch}: {detail}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Format(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Format(err.to_string())
    }
}
