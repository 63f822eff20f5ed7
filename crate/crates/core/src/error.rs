use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition of the
    /// operation's domain (bad shapes, negative masses, duplicate nodes, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical precondition failed (CFL violation, non-probability
    /// input to a solver, missing stored fluxes, ...).
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Geometry escaping a declared domain (edge segment leaving a grid).
    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    /// Instance too large for an exact small-instance algorithm.
    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
