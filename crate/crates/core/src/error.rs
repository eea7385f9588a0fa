use std::io;

use crate::merge::Segment;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("{op}: expected length {expected}, got {actual}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{0}: non-finite value")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("row {row} is not a causal probability row (sum {sum})")]
    NotStochastic { row: usize, sum: f32 },

    #[error("position {position} ({segment:?}) does not follow position {last} in layer {layer}")]
    OutOfOrder {
        layer: usize,
        position: usize,
        last: usize,
        segment: Segment,
    },

    #[error("no attention scores supplied for layer {0}")]
    MissingScores(usize),

    #[error("cache is empty; run prefill first")]
    EmptyCache,

    #[error("bad tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
