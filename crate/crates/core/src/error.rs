use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("inconsistent channel chaining at layer {layer}: expected {expected} input channels, found {found}")]
    ChannelChain {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("state space of {states} configurations exceeds the enumeration cap of {cap}")]
    StateCapExceeded { states: u128, cap: u64 },

    #[error("target statistics look infeasible: gap {gap:.3e} stalled while |w| = {weight_norm:.3e}")]
    Infeasible { gap: f64, weight_norm: f64 },

    #[error("divergence is infinite: q vanishes at state {state} where p is positive")]
    InfiniteDivergence { state: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
