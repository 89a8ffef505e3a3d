use thiserror::Error;

/// Errors raised by the learners, oracles and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A point, state or action lies outside the declared space.
    #[error("domain error: {0}")]
    Domain(String),
    /// A grid-based oracle cannot certify its answer at the requested resolution.
    #[error("precision error: {0}")]
    Precision(String),
    #[error("unknown ball id {0}")]
    UnknownBall(usize),
    /// A caller broke an operation's precondition.
    #[error("contract violated: {0}")]
    Contract(String),
    /// An internal invariant of the partition or agent no longer holds.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
