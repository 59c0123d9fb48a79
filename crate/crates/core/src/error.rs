use thiserror::Error;

/// Errors raised across the refinement and post-training pipelines.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value, schema, or call parameter is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A configuration key failed to parse or validate.
    #[error("configuration error for `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    /// Two related inputs disagree in shape (keys, lengths, alignment).
    #[error("structural error: {0}")]
    Structural(String),

    /// An input value is outside its domain (token ids, empty sequences).
    #[error("input error: {0}")]
    Input(String),

    /// Optimization produced a non-finite loss or gradient.
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    /// A metric was requested over an empty evaluation set.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn key(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigKey {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
