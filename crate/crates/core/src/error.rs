use thiserror::Error;

/// Errors shared by every module of the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller supplied an argument outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// The operation is undefined for the given state (e.g. an empty population).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration is inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// A simulation exceeded its population cap.
    #[error("population cap of {cap} exceeded ({alive} alive, {leaves} leaves, {pruned} pruned)")]
    Resource {
        cap: usize,
        alive: usize,
        leaves: usize,
        pruned: usize,
    },

    /// A rejection sampler ran out of proposals before collecting enough samples.
    #[error("rejection budget of {budget} proposals exhausted with {accepted} accepted")]
    Budget { budget: u64, accepted: u64 },

    /// Not enough data for a statistical procedure.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io: {0}")]
    Io(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
