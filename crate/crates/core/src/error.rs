use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed metadata {path}: {message}")]
    Metadata { path: PathBuf, message: String },

    #[error("no usable records in {path} ({dropped} rows dropped)")]
    EmptyDataset { path: PathBuf, dropped: usize },

    #[error("failed to load image for dish {dish_id} ({path}): {message}")]
    ImageLoad {
        dish_id: String,
        path: PathBuf,
        message: String,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("R² undefined: true values have zero variance")]
    UndefinedR2,

    #[error("pairing error: {0}")]
    Pairing(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}

pub(crate) use arg_err;
pub(crate) use dim_err;
