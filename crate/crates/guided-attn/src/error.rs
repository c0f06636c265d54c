//! Crate-wide error type, partitioned by the process exit code each
//! category maps to (1 = usage, 2 = data, 3 = numerical).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad flags, malformed config, contract violations at the API surface.
    #[error("usage error: {0}")]
    Usage(String),
    /// Missing or inconsistent data: files, manifests, masks, splits.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values, failed gradient checks, degenerate numerics.
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
