use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FactoryError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FactoryError {
    /// Bad or inconsistent configuration (dimensions, missing layers, unknown keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// A call-site argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A loss component became NaN or infinite.
    #[error("non-finite value in `{component}`: {value}")]
    NonFinite { component: String, value: f64 },

    /// Malformed on-disk data (checkpoint, annotation file, dataset).
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl FactoryError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Self::Argument(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Stage {
            stage: stage.into(),
            message: msg.into(),
        }
    }
}

/// Fails with [`FactoryError::NonFinite`] naming `component` when `value` is NaN or infinite.
pub fn ensure_finite(component: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(FactoryError::NonFinite {
            component: component.to_string(),
            value,
        })
    }
}
