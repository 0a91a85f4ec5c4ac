use std::path::PathBuf;

/// Errors raised across the toolkit.
///
/// The variants follow the failure classes callers need to route on:
/// bad arguments and configurations are validation failures, format and
/// I/O problems come from persistence, and `EmptyRoi` marks a sample that
/// must go to human review.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training error in parameter {param}: {detail}")]
    Training { param: String, detail: String },

    #[error("integration error: {0}")]
    Integration(String),

    #[error("empty region of interest: mask has no foreground pixels")]
    EmptyRoi,

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad input rather than by the runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Argument(_)
                | Error::Config(_)
                | Error::Shape { .. }
                | Error::Parse { .. }
                | Error::Format { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
