use thiserror::Error;

/// Errors raised by model construction, numeric kernels and file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or configuration values are inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite or out-of-domain value was produced or supplied.
    #[error("numeric error: {what} at index {index}")]
    Numeric { what: String, index: usize },

    /// A file did not match the expected binary or text layout.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<S: Into<String>>(msg: S) -> Error {
    Error::Config(msg.into())
}

macro_rules! ensure_config {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Config(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_config;

pub(crate) fn format_err<S: Into<String>>(msg: S) -> Error {
    Error::Format(msg.into())
}
