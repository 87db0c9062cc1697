//! Crate-wide error type. Numeric ops report shapes and op names so a
//! failing call can be located without a debugger; pipeline errors carry
//! file/line context assembled by the caller.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// The operation was called in a way the contract forbids
    /// (backward on a non-scalar, optimizer state desync, ...).
    #[error("{op}: {msg}")]
    Usage { op: &'static str, msg: String },

    /// Bad configuration value (zero heads, odd encoding width, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// A file on disk does not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite quantity and the step was aborted.
    #[error("training error: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn usage(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Usage {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
