use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or layer geometry.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("malformed tensor archive: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}
pub(crate) use config_err;
