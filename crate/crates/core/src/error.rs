use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {msg} (residual {residual:e})")]
    Numeric { msg: String, residual: f64 },

    #[error("degenerate Householder vector {index}: norm {norm:e}")]
    DegenerateVector { index: usize, norm: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<S: Into<String>>(msg: S) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn contract<S: Into<String>>(msg: S) -> Error {
    Error::Contract(msg.into())
}
