use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input coordinate at index {0}")]
    NumericInput(usize),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
