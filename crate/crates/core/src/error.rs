use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate norm: {0}")]
    DegenerateNorm(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("class conflict: {0}")]
    Conflict(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing class-mean prototype for class {0}")]
    MissingPrototype(u32),

    #[error("replay coverage: {0}")]
    ReplayCoverage(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("synthesis failed: {0}")]
    Synthesis(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing prerequisite {}: {reason}", .path.display())]
    Dependency { path: PathBuf, reason: String },

    #[error("incompatible archive: {0}")]
    Incompatible(String),

    #[error("malformed archive: {0}")]
    Format(String),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
