//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or invalid configuration; the message names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// Shape or dimension mismatch between rasters, kernels or maps.
    #[error("shape error: {0}")]
    Shape(String),

    /// Quantization scheme could not be fitted.
    #[error("quantizer fit error: {0}")]
    Fit(String),

    /// A loss was requested on an empty pixel set.
    #[error("loss error: {0}")]
    Loss(String),

    /// On-disk dataset or raster format violation.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint manifest/blob mismatch or corruption.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted; the message names the offending loss term.
    #[error("training error: {0}")]
    Train(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
