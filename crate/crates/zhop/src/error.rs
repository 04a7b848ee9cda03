use thiserror::Error;

/// Failure modes surfaced by the library.
///
/// `Dimension` and `Domain` flag calls that violate an operation's contract,
/// `Numeric` flags computations that lost validity at runtime (NaN, failed
/// factorization, residues above tolerance), and `Config` flags an invalid
/// run description before any work starts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
