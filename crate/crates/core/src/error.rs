use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singularity: {0}")]
    Singularity(String),
    #[error("stale structure: cell list does not match the current configuration")]
    StaleStructure,
    #[error("core overlap: {0}")]
    CoreOverlap(String),
    #[error("resource limit: {0}")]
    ResourceLimit(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("sign convention unidentifiable: {0}")]
    Unidentifiable(String),
    #[error("sign resolution failed: {0}")]
    SignResolution(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
