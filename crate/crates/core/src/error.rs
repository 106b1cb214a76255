use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("episode finished")]
    EpisodeFinished,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate latent")]
    DegenerateLatent,
    #[error("degenerate perturbation")]
    DegeneratePerturbation,
    #[error("no counterfactual found")]
    NoCounterfactual,
    #[error("insufficient class coverage")]
    InsufficientClassCoverage,
    #[error("empty batch")]
    EmptyBatch,
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated file at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("checksum mismatch")]
    Checksum,
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
