use std::path::PathBuf;

use crate::frames::Frame;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geodetic coordinate: lat={lat}, lon={lon}")]
    InvalidGeodetic { lat: f64, lon: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("frame mismatch: expected {expected:?}, got {actual:?}")]
    FrameMismatch { expected: Frame, actual: Frame },

    #[error("rotation is not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
