use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A request cannot be auctioned (empty slot list, unknown bidder, ...).
    #[error("malformed request: {0}")]
    MalformedRequest(String),

    /// An input is outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// A mechanism failed a construction-time invariant.
    #[error("invalid mechanism: {0}")]
    InvalidMechanism(String),

    /// Calibration found no report with positive conversions on a non-empty market.
    #[error("empty frontier: no report on the grid achieves positive conversions")]
    EmptyFrontier,

    /// The delivery planner was asked for a target with no requests left.
    #[error("planning error: {0}")]
    Planning(String),

    /// Episode aggregation needs at least one delivery record.
    #[error("empty episode: no delivery records")]
    EmptyEpisode,

    /// Configuration file problems (missing keys, unparsable values, bad combinations).
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
