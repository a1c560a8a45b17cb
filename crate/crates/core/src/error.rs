use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("index out of range: {what} {index} >= {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid asset: {0}")]
    InvalidAsset(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("point behind camera {camera} (depth {depth:.3e})")]
    BehindCamera { camera: usize, depth: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("EM failed: {0}")]
    Em(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("unsupported file version {found} for {kind} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}
