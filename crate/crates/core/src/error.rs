use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {what} of size {bound}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("selector pattern `{0}` matches no parameter")]
    UnresolvedPattern(String),

    #[error("unknown parameter path `{0}`")]
    UnknownPath(String),

    #[error("parameter trees differ: {0}")]
    TreeMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
