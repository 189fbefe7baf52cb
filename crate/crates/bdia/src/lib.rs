//! BDIA-transformer: bit-level reversible transformer training.
//!
//! Transformer blocks are treated as Euler steps of an ODE and averaged in
//! pairs by a per-sample, per-block random coefficient `gamma` in
//! `{-0.5, +0.5}`. With activations quantized to the `2^-l` grid and one
//! parity bit of side information per element, the forward recursion is
//! exactly invertible in the integer domain, so the backward pass can
//! reconstruct activations instead of storing them. At inference `gamma` is
//! replaced by its expectation 0 and the network reduces to a standard
//! (quantized) transformer.
//!
//! Layering, bottom up:
//! - [`quant`]: fixed-point states, side bits, the exact halving identity;
//! - [`tensor`] / [`ops`]: deterministic dense math with hand-written VJPs;
//! - [`block`]: the residual branch `h(x) = f(x) + g(x + f(x))`;
//! - [`dynamics`]: the averaged state recursions, their exact reverse, and
//!   the inference reductions;
//! - [`model`] / [`trainer`]: a small token-sequence model and two training
//!   engines (store-everything baseline, reconstruct-backwards reversible);
//! - [`tasks`] / [`config`] / [`experiments`]: synthetic datasets, run
//!   configs, and the experiment entry points behind the `bdia` binary.

pub mod block;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod model;
pub mod ops;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
