//! Crate-wide error type.
//!
//! Data-dependent failures (out-of-range activations, corrupted side bits,
//! bad configs) are reported through [`Error`]. Structural misuse of the
//! tensor primitives (shape mismatches, stale tape frames) panics instead;
//! those are programmer errors, not runtime conditions.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// An activation magnitude reached or exceeded `2^range_exp`.
    RangeOverflow { op: &'static str, value: f64, limit: f64 },
    /// A tensor fed to a quantization or dynamics op contains NaN/infinity.
    NonFinite { op: &'static str },
    /// `n + side_bit` was odd for some element: the side bits do not belong
    /// to this state.
    ParityViolation { index: usize },
    /// The quantized reversible update only supports `|gamma| = 0.5` (or 0
    /// for the inference reduction).
    GammaUnsupported { gamma: f64 },
    /// A reconstructed state failed verification against the forward pass.
    ReversalMismatch { block: usize, max_deviation: i64 },
    /// A class/token index is outside the valid range.
    IndexOutOfRange { index: i64, len: usize },
    /// The quantization config violates `l >= 1`, `range_exp >= 1` or the
    /// integer/float headroom bound.
    InvalidQuantConfig { l: u32, range_exp: u32, reason: &'static str },
    /// Training produced a non-finite loss.
    NonFiniteLoss { step: u64 },
    /// The char-lm corpus file is absent.
    CorpusMissing { path: PathBuf },
    /// Config file parse or schema failure, with 1-based line number when
    /// the failure is tied to a specific line.
    Config { line: Option<usize>, message: String },
    /// Checkpoint serialization/deserialization failure.
    Checkpoint(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::RangeOverflow { op, value, limit } => {
                write!(f, "{op}: |{value}| >= {limit} exceeds the activation range")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite element"),
            Error::ParityViolation { index } => {
                write!(f, "side bits are inconsistent with state parity at element {index}")
            }
            Error::GammaUnsupported { gamma } => {
                write!(f, "gamma = {gamma} is not supported by the quantized reversible update")
            }
            Error::ReversalMismatch { block, max_deviation } => {
                write!(f, "reconstructed state at block {block} deviates by {max_deviation}")
            }
            Error::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
            Error::InvalidQuantConfig { l, range_exp, reason } => {
                write!(f, "invalid quantization config (l={l}, range_exp={range_exp}): {reason}")
            }
            Error::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            Error::CorpusMissing { path } => {
                write!(f, "char-lm corpus file not found: {}", path.display())
            }
            Error::Config { line: Some(line), message } => {
                write!(f, "config error at line {line}: {message}")
            }
            Error::Config { line: None, message } => write!(f, "config error: {message}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
