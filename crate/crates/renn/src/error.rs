use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a mathematical precondition (off-simplex vector,
    /// negative evidence, mismatched lengths, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration or argument combination is invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// A file had the wrong layout or could not be parsed.
    #[error("format error: {0}")]
    Format(String),
    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Training(String),
    /// A cache or internal state was used inconsistently.
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
