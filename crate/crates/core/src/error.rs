use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, invalid weights, or an otherwise unusable configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller passed an argument outside the operation's domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// A state or intermediate quantity became non-finite.
    #[error("numerical overflow: {0}")]
    Overflow(String),

    /// A rollout left the overflow guard region; carries the time of blow-up.
    #[error("trajectory diverged at t = {t}: {context}")]
    Divergence { t: f64, context: String },

    /// An iterative solver failed to converge or its inputs were unsolvable.
    #[error("solver error: {0}")]
    Solver(String),

    /// A least-squares or pseudoinverse system was rank deficient.
    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    /// Training produced non-finite diagnostics (learning divergence).
    #[error("diagnostics error: {0}")]
    Diagnostics(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
