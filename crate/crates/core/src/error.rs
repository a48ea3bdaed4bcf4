use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {what} at step {step:?}, row {row:?}, index {index:?}")]
    NonFinite {
        what: &'static str,
        step: Option<usize>,
        row: Option<usize>,
        index: Option<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("stale tape: trajectory was recorded under different parameters")]
    StaleTape,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("training aborted at epoch {epoch}, step {step}: {cause}")]
    Aborted {
        epoch: u64,
        step: u64,
        #[source]
        cause: Box<Error>,
        /// State at the last completed epoch.
        last_good: Box<crate::trainer::Checkpoint>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn non_finite(what: &'static str) -> Self {
        Error::NonFinite {
            what,
            step: None,
            row: None,
            index: None,
        }
    }

    /// Attaches an integration step index to a numeric error.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::NonFinite {
                what, row, index, ..
            } => Error::NonFinite {
                what,
                step: Some(step),
                row,
                index,
            },
            other => other,
        }
    }
}
