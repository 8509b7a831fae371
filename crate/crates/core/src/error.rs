use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied malformed or inconsistent input (dimensions, signs, ranks).
    #[error("input error: {0}")]
    Input(String),

    /// An object was used in a state that violates its construction invariants.
    #[error("invalid state: {0}")]
    State(String),

    /// A numerical routine could not produce a trustworthy result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Internal consistency check failed; indicates a bug, not bad input.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure_input {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Input(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_input;
