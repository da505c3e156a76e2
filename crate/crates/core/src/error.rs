use thiserror::Error;

/// Errors surfaced by the library.
///
/// The CLI maps these onto exit codes: configuration problems are usage
/// errors, format/lookup problems are data errors, and `Numeric` signals a
/// NaN/Inf escaping a computation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image id not found: {0}")]
    NotFound(String),

    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
