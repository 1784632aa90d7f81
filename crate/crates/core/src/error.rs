use std::path::PathBuf;

/// Errors produced by the distillation library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A pose whose polar angle sits on (or beyond) a pole, where the look-at
    /// frame has no well-defined up vector.
    #[error("degenerate camera up vector: polar angle {polar_deg}° must lie strictly inside (0, 180)")]
    DegenerateUp { polar_deg: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Shapes or sizes of two operands do not agree.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}: {what}")]
    NonFinite { iteration: u64, what: String },

    #[error("cache build aborted: {0}")]
    CacheAborted(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("PNG error on {path}: {message}")]
    Png { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
