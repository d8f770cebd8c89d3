//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("sentence rejected: {0} words outside the 4..=20 range")]
    SentenceLength(usize),

    #[error("frame length {got} does not match expected {expected} channel uses")]
    FrameLength { got: usize, expected: usize },

    #[error("zero-energy frame: power normalization undefined")]
    ZeroEnergyFrame,

    #[error("channel gain is zero for user {0}; equalization undefined")]
    ZeroGain(usize),

    #[error("invalid channel case index {0}; expected 1..=7")]
    InvalidCase(usize),

    #[error("mismatched frame lengths across users")]
    MismatchedFrames,

    #[error("side information cache is missing features from user {0}")]
    MissingSideInfo(usize),

    #[error("empty user range for the retraining loss")]
    EmptyLossRange,

    #[error("training diverged: non-finite loss at step {0}")]
    Diverged(usize),

    #[error("cannot embed a zero vector")]
    ZeroVector,

    #[error("word not in codebook: {0}")]
    UnknownWord(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
