// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised while loading traces, computing salience, building or
/// applying plans, and running the toy decoder.
#[derive(Debug, Error)]
#[non_exhaustive]
pub enum AidError {
    /// The trace document could not be parsed or has the wrong schema.
    #[error("malformed trace document: {0}")]
    MalformedDocument(String),

    /// Token roles are not in `other* image+ instruction+ generated*` order,
    /// or the token list disagrees with the attention arrays.
    #[error("layout violation: {0}")]
    LayoutViolation(String),

    /// An attention row does not sum to one within the ingest tolerance.
    #[error("row sum violation at layer {layer}, head {head}, query {query}: sum = {sum}")]
    RowSumViolation {
        layer: usize,
        head: usize,
        query: usize,
        sum: f64,
    },

    /// An attention row has the wrong length or holds a negative or
    /// non-finite weight.
    #[error("shape violation: {0}")]
    ShapeViolation(String),

    #[error("no generated tokens")]
    NoGeneratedTokens,

    /// The trace exceeds the enumeration caps of the path oracle.
    #[error("instance too large for the path oracle: {0}")]
    InstanceTooLarge(String),

    #[error("invalid similarity source {0}: must be an image or instruction token")]
    InvalidSource(usize),

    #[error("invalid hijacker count {0}: must be at least 1")]
    InvalidCount(usize),

    #[error("empty hijacker set")]
    EmptyHijackerSet,

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("visual fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),

    #[error("salience fields were computed over different layouts")]
    LayoutMismatch,

    #[error("invalid toy config: {0}")]
    InvalidConfig(String),

    #[error("sequence length {requested} exceeds max_seq_len {max}")]
    LengthExceeded { requested: usize, max: usize },

    #[error("planting failed: {0}")]
    PlantingFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AidError>;
