use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum GcpoError {
    /// An input violated a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration value is out of its allowed range.
    #[error("config error: {0}")]
    Config(String),

    /// Gradient stencils need at least two rows and two columns.
    #[error("degenerate grid {height}x{width}: entropy gradients need at least 2x2")]
    DegenerateGrid { height: usize, width: usize },

    /// Cosine similarity is undefined for a zero vector.
    #[error("zero-norm embedding at position {position}, sample {sample}")]
    ZeroEmbedding { position: usize, sample: usize },

    /// Training produced a NaN or infinity. `dump` is a JSON description of the batch.
    #[error("non-finite {what} at step {step}")]
    NonFinite {
        what: String,
        step: usize,
        dump: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed checkpoint: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, GcpoError>;

impl GcpoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GcpoError::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::GcpoError::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
