//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("score {value} outside [{lo}, {hi}]")]
    ScoreOutOfRange { value: f64, lo: f64, hi: f64 },
    /// Output that could not be interpreted (e.g. no leading true/false, no
    /// numeric score). Gating treats this as a signal, not a hard failure.
    #[error("parse: {0}")]
    Parse(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("ingestion: {0}")]
    Ingestion(String),
    #[error("auth: {0}")]
    Auth(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("rate limit: {0}")]
    RateLimited(String),
    #[error("endpoint reply malformed: {0}")]
    MalformedReply(String),
    #[error("cache conflict for key {key}: {detail}")]
    CacheConflict { key: String, detail: String },
    /// A stage stopped before scheduling all units (fault injection or an
    /// operator abort). Checkpoints are on disk; the stage can be resumed.
    #[error("stage interrupted after {completed} completed units")]
    Interrupted { completed: usize },
    #[error("run store: {0}")]
    RunStore(String),
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Transport and rate-limit failures are worth retrying; everything else
    /// (auth, malformed replies, validation) is not.
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::RateLimited(_))
    }
}
