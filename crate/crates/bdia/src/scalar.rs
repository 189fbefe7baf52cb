//! Working-precision abstraction.
//!
//! Everything float-valued in the crate is generic over [`Scalar`], so the
//! same code runs in 32-bit (training default) or 64-bit (gradient checks).
//! Transcendentals go through `libm` so results are bitwise reproducible
//! across platforms, not just across runs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

pub trait Scalar: Float + Debug + Display + Sum + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Raw bit pattern widened to u64, for bitwise-equality assertions.
    fn bits(self) -> u64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn ln(self) -> Self {
        libm::logf(self)
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Runtime selector for the working precision, set from configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}
