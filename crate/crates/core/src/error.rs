use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular optics configuration: {0}")]
    SingularOptics(String),

    #[error("degenerate alpha configuration: ridge normal matrix is singular")]
    DegenerateAlpha,

    #[error("all {restarts} restarts degenerated (non-finite loss)")]
    AllRestartsDegenerate { restarts: usize },

    #[error("rank-deficient calibration: {0}")]
    RankDeficient(String),

    #[error("empty evaluation mask")]
    EmptyMask,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}
