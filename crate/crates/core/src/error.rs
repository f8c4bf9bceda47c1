//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("zero-norm vector where a direction is required ({0})")]
    ZeroNorm(&'static str),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("idx parse error: {0}")]
    Idx(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("not enough updates for {rule}: need at least {needed}, got {got}")]
    TooFewUpdates {
        rule: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("not converged: {0}")]
    NotConverged(String),

    #[error("replay buffer holds {have} transitions, {need} required")]
    Underfilled { have: usize, need: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}
