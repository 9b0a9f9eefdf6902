use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid dimensions {width}x{height}: both must be odd and at least 5")]
    Dimension { width: usize, height: usize },

    #[error("task generation failed after {attempts} feasibility attempts (seed {seed})")]
    Generation { seed: u64, attempts: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("planning error: {0}")]
    Planning(String),

    #[error("exploration exhausted: frontier empty while the objective is still unknown")]
    ExplorationExhausted,

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("distribution not normalized (total mass {0})")]
    NotNormalized(f64),

    #[error("non-finite loss at epoch {epoch}, step {step}; learning rate too high?")]
    NonFinite { epoch: usize, step: usize },

    #[error("format version mismatch: found {found}, expected {expected}")]
    Version { found: u16, expected: u16 },

    #[error("checksum mismatch in record {index}")]
    Checksum { index: usize },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("no data: {0}")]
    NoData(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
