use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied something outside an operation's contract.
    #[error("input error: {0}")]
    Input(String),

    /// A computation produced NaN or infinity.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },

    /// An object was used in a state that does not permit the call.
    #[error("state error: {0}")]
    State(String),

    /// The operation does not support the given taxonomy or dataset shape.
    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    /// A file failed to parse or did not match its schema.
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    /// True for failures caused by non-finite arithmetic.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}

/// Shorthand for early-returning an [`Error::Input`].
macro_rules! ensure_input {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Input(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_input;
