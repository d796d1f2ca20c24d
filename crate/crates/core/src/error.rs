//! Error taxonomy shared by the library and the CLI.
//!
//! The CLI maps these onto process exit codes: config errors are
//! recoverable user mistakes, corruption covers unreadable artifacts,
//! and non-finite aborts surface numerical blow-ups instead of
//! clipping them away.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible operand shapes, naming both sides.
    #[error("dimension mismatch in {op}: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    Dimension {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or key.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file exists but does not decode as the expected format.
    #[error("corrupt artifact: {0}")]
    Corrupt(String),

    /// Training produced a non-finite quantity; the run is aborted.
    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },
}

impl Error {
    pub(crate) fn dimension(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }
}
