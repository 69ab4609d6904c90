use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("batch normalization needs at least 2 rows in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
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

    /// Wraps a numeric fault with additional context (epoch, batch, parameter...).
    pub fn with_context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::NumericFault(msg) => Error::NumericFault(format!("{ctx}: {msg}")),
            other => other,
        }
    }
}
