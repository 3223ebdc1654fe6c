use std::path::PathBuf;

/// Errors produced anywhere in the generation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// NaN or infinity where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An invalid or missing configuration value. `key` names the offending field.
    #[error("config error for `{key}`: {message}")]
    Config { key: String, message: String },

    /// An attention store or hook set does not match the layer topology.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A hook addressed a layer the denoiser does not have.
    #[error("unknown layer id {0}")]
    UnknownLayer(usize),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("encoder error: {0}")]
    Encoder(String),

    #[error("embedder error: {0}")]
    Embedder(String),

    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the invocation rather than by a failure at run time.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
