//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector that must have nonzero norm (e.g. an embedding fed to a
    /// cosine) was identically zero.
    #[error("zero-norm vector in {0} (degenerate embedding)")]
    ZeroNorm(&'static str),

    /// Shapes or lengths that must agree do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A value violated a precondition (out-of-vocabulary id, non-finite
    /// input, mode/gold mismatch, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is outside its legal range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A caller-facing contract was violated (empty corpus, batch too
    /// small for contrastive noise, k larger than the corpus, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Correlation of a constant sequence is undefined.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// A data file failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A data file parsed but violates the schema; `line` is 1-based.
    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A checkpoint file is truncated, corrupted, or fails its digest.
    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    /// A checkpoint was written by an incompatible format version.
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
}
