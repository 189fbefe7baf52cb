//! The averaged two-state recursions.
//!
//! Training forward (quantized), `k >= 1`, per sample with `gamma` in
//! `{+0.5, -0.5}`:
//!
//! ```text
//! x_{k+1} = gamma * (x_{k-1} + s_{k-1} * 2^-l)
//!         + Q_l[(1 - gamma) * x_k + (1 + gamma) * h_k(x_k)]
//! ```
//!
//! The first term is evaluated exactly in the integer domain (the parity
//! bit makes the halving exact), the second is one float expression with a
//! single rounding site. That structure is what makes the reverse
//!
//! ```text
//! x_{k-1} = (1/gamma) * x_{k+1} - s_{k-1} * 2^-l
//!         - (1/gamma) * Q_l[(1 - gamma) * x_k + (1 + gamma) * h_k(x_k)]
//! ```
//!
//! bit-exact: `1/gamma = +-2` and everything stays on the grid. The
//! unquantized recursion and its naive float inverse are kept alongside for
//! the ablation regime and to demonstrate why the naive inverse drifts.

use crate::block::{block_forward, BlockParams};
use crate::error::{Error, Result};
use crate::quant::{decode, quantize, side_bits, QuantConfig, QuantizedState, SideBits};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deterministic per-(sample, block, step) source of the averaging
/// coefficient. Re-querying any key returns the identical value, which is
/// how the reverse pass regenerates the forward coefficients without
/// storing them.
#[derive(Debug, Clone, Copy)]
pub struct GammaSchedule {
    seed: u64,
    magnitude: f64,
    mode: GammaMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaMode {
    /// `+magnitude` or `-magnitude` with equal probability per key.
    BinaryRandom,
    /// Always `+magnitude` (a single fixed member of the solver family).
    Constant,
    /// Always exactly zero (standard transformer path).
    Zero,
}

impl GammaSchedule {
    pub fn binary(seed: u64, magnitude: f64) -> Result<Self> {
        if !(0.0..=0.6).contains(&magnitude) {
            return Err(Error::GammaUnsupported { gamma: magnitude });
        }
        Ok(GammaSchedule { seed, magnitude, mode: GammaMode::BinaryRandom })
    }

    pub fn constant(value: f64) -> Result<Self> {
        if value.abs() > 0.6 {
            return Err(Error::GammaUnsupported { gamma: value });
        }
        Ok(GammaSchedule { seed: 0, magnitude: value, mode: GammaMode::Constant })
    }

    pub fn zero() -> Self {
        GammaSchedule { seed: 0, magnitude: 0.0, mode: GammaMode::Zero }
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn mode(&self) -> GammaMode {
        self.mode
    }

    pub fn gamma(&self, sample: u64, block: usize, step: u64) -> f64 {
        match self.mode {
            GammaMode::Zero => 0.0,
            GammaMode::Constant => self.magnitude,
            GammaMode::BinaryRandom => {
                if self.magnitude == 0.0 {
                    return 0.0;
                }
                let bit = crate::rng::hash_words(&[self.seed, sample, block as u64, step]) & 1;
                if bit == 1 {
                    self.magnitude
                } else {
                    -self.magnitude
                }
            }
        }
    }

    /// Coefficients for one batch at one interior block.
    pub fn gammas_for(&self, sample_ids: &[u64], block: usize, step: u64) -> Vec<f64> {
        sample_ids.iter().map(|&s| self.gamma(s, block, step)).collect()
    }
}

/// A trajectory state in either the quantized or the float regime.
#[derive(Debug, Clone)]
pub enum State<S: Scalar> {
    Quantized(QuantizedState),
    Float(Tensor<S>),
}

impl<S: Scalar> State<S> {
    pub fn decode(&self) -> Tensor<S> {
        match self {
            State::Quantized(q) => decode(q),
            State::Float(t) => t.clone(),
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            State::Quantized(q) => q.len(),
            State::Float(t) => t.len(),
        }
    }

    pub fn as_quantized(&self) -> &QuantizedState {
        match self {
            State::Quantized(q) => q,
            State::Float(_) => panic!("expected a quantized state"),
        }
    }

    pub fn bitwise_eq(&self, other: &State<S>) -> bool {
        match (self, other) {
            (State::Quantized(a), State::Quantized(b)) => a == b,
            (State::Float(a), State::Float(b)) => {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.bits() == y.bits())
            }
            _ => false,
        }
    }
}

fn batch_of(shape: &[usize], gammas: &[f64]) -> usize {
    let batch = shape.first().copied().unwrap_or(0);
    assert_eq!(batch, gammas.len(), "one gamma per leading row required");
    assert!(batch > 0, "empty batch");
    batch
}

fn gamma_sign_quantized(gamma: f64) -> Result<i64> {
    if gamma == 0.5 {
        Ok(1)
    } else if gamma == -0.5 {
        Ok(-1)
    } else if gamma == 0.0 {
        Ok(0)
    } else {
        Err(Error::GammaUnsupported { gamma })
    }
}

/// The second term of the update, `(1 - gamma) * x_k + (1 + gamma) * h_k`,
/// as one float expression. Forward and reverse both call this, so the
/// reverse subtracts bitwise the same quantity the forward added.
fn combine_curr_and_h<S: Scalar>(
    x_curr: &QuantizedState,
    h_curr: &Tensor<S>,
    gammas: &[f64],
) -> Tensor<S> {
    let one_minus: Vec<S> = gammas.iter().map(|&g| S::from_f64(1.0 - g)).collect();
    let one_plus: Vec<S> = gammas.iter().map(|&g| S::from_f64(1.0 + g)).collect();
    decode::<S>(x_curr).scale_rows(&one_minus).add(&h_curr.scale_rows(&one_plus))
}

/// Quantized forward update for one interior block (`k >= 1`).
///
/// `gammas` holds one coefficient per leading row of the states; each must
/// be `+-0.5` (or exactly 0, which reduces that row to the standard
/// quantized update). Returns the next state together with the parity bits
/// of `x_prev` that the reverse pass will need.
pub fn bdia_forward_step_quantized<S: Scalar>(
    x_prev: &QuantizedState,
    x_curr: &QuantizedState,
    h_curr: &Tensor<S>,
    gammas: &[f64],
) -> Result<(QuantizedState, SideBits)> {
    assert_eq!(x_prev.shape(), x_curr.shape(), "state shapes disagree");
    assert_eq!(x_curr.shape(), h_curr.shape(), "h shape disagrees with states");
    assert_eq!(x_prev.cfg(), x_curr.cfg(), "quantization configs disagree");
    let batch = batch_of(x_prev.shape(), gammas);
    let cfg = x_prev.cfg();
    let row = x_prev.len() / batch;

    let signs = gammas.iter().map(|&g| gamma_sign_quantized(g)).collect::<Result<Vec<_>>>()?;
    let s_prev = side_bits(x_prev);
    let term2 = quantize(&combine_curr_and_h(x_curr, h_curr, gammas), cfg)?;

    let mut out = Vec::with_capacity(x_prev.len());
    for (b, &sign) in signs.iter().enumerate() {
        for m in b * row..(b + 1) * row {
            let term1 = if sign == 0 {
                0
            } else {
                let sum = x_prev.ints()[m] as i64 + s_prev.get(m) as i64;
                debug_assert_eq!(sum & 1, 0, "side bits disagree with their own state");
                sign * (sum >> 1)
            };
            let n = term1 + term2.ints()[m] as i64;
            if n.abs() >= cfg.int_limit() {
                return Err(Error::RangeOverflow {
                    op: "bdia_forward_step_quantized",
                    value: n as f64 * cfg.step(),
                    limit: cfg.value_limit(),
                });
            }
            out.push(n as i32);
        }
    }
    let x_next = QuantizedState::from_ints(x_prev.shape().to_vec(), out, cfg)?;
    Ok((x_next, s_prev))
}

/// Lossless reverse of [`bdia_forward_step_quantized`]: reconstructs
/// `x_{k-1}` bit-exactly from `(x_k, x_{k+1})`, the recomputed `h_k(x_k)`,
/// the stored parity bits and the regenerated coefficients.
pub fn bdia_reverse_step<S: Scalar>(
    x_curr: &QuantizedState,
    x_next: &QuantizedState,
    h_curr: &Tensor<S>,
    gammas: &[f64],
    s_prev: &SideBits,
) -> Result<QuantizedState> {
    assert_eq!(x_curr.shape(), x_next.shape(), "state shapes disagree");
    assert_eq!(x_curr.shape(), h_curr.shape(), "h shape disagrees with states");
    assert_eq!(s_prev.len(), x_curr.len(), "side bits length mismatch");
    let batch = batch_of(x_curr.shape(), gammas);
    let cfg = x_curr.cfg();
    let row = x_curr.len() / batch;

    let invs: Vec<i64> = gammas
        .iter()
        .map(|&g| match gamma_sign_quantized(g)? {
            0 => Err(Error::GammaUnsupported { gamma: 0.0 }),
            s => Ok(2 * s), // 1/gamma
        })
        .collect::<Result<Vec<_>>>()?;
    let term2 = quantize(&combine_curr_and_h(x_curr, h_curr, gammas), cfg)?;

    let mut out = Vec::with_capacity(x_curr.len());
    for (b, &inv) in invs.iter().enumerate() {
        for m in b * row..(b + 1) * row {
            let n = inv * (x_next.ints()[m] as i64 - term2.ints()[m] as i64)
                - s_prev.get(m) as i64;
            if n.abs() >= cfg.int_limit() {
                return Err(Error::RangeOverflow {
                    op: "bdia_reverse_step",
                    value: n as f64 * cfg.step(),
                    limit: cfg.value_limit(),
                });
            }
            out.push(n as i32);
        }
    }
    QuantizedState::from_ints(x_curr.shape().to_vec(), out, cfg)
}

/// Unquantized update: `x_{k+1} = gamma x_{k-1} + (1 - gamma) x_k +
/// (1 + gamma) h_k`. Valid for any `|gamma| <= 0.6`; used by the ablation
/// regime and as the contrast case for error accumulation.
pub fn bdia_forward_step_float<S: Scalar>(
    x_prev: &Tensor<S>,
    x_curr: &Tensor<S>,
    h_curr: &Tensor<S>,
    gammas: &[f64],
) -> Result<Tensor<S>> {
    assert_eq!(x_prev.shape(), x_curr.shape(), "state shapes disagree");
    assert_eq!(x_curr.shape(), h_curr.shape(), "h shape disagrees with states");
    let _ = batch_of(x_prev.shape(), gammas);
    assert!(gammas.iter().all(|g| g.abs() <= 0.6), "|gamma| must be <= 0.6 in the float update");
    let g: Vec<S> = gammas.iter().map(|&v| S::from_f64(v)).collect();
    let one_minus: Vec<S> = gammas.iter().map(|&v| S::from_f64(1.0 - v)).collect();
    let one_plus: Vec<S> = gammas.iter().map(|&v| S::from_f64(1.0 + v)).collect();
    let out = x_prev
        .scale_rows(&g)
        .add(&x_curr.scale_rows(&one_minus))
        .add(&h_curr.scale_rows(&one_plus));
    if !out.all_finite() {
        return Err(Error::NonFinite { op: "bdia_forward_step_float" });
    }
    Ok(out)
}

/// Algebraic inverse of the float update. Exact only in exact arithmetic:
/// the `1/gamma = +-2` factor amplifies float rounding at every block,
/// which is precisely the drift the quantized path removes.
pub fn naive_reverse_step_float<S: Scalar>(
    x_curr: &Tensor<S>,
    x_next: &Tensor<S>,
    h_curr: &Tensor<S>,
    gammas: &[f64],
) -> Result<Tensor<S>> {
    assert_eq!(x_curr.shape(), x_next.shape(), "state shapes disagree");
    assert_eq!(x_curr.shape(), h_curr.shape(), "h shape disagrees with states");
    let _ = batch_of(x_curr.shape(), gammas);
    assert!(gammas.iter().all(|&g| g != 0.0), "gamma must be nonzero to invert");
    let inv: Vec<S> = gammas.iter().map(|&g| S::from_f64(1.0 / g)).collect();
    let a: Vec<S> = gammas.iter().map(|&g| S::from_f64((1.0 - g) / g)).collect();
    let b: Vec<S> = gammas.iter().map(|&g| S::from_f64((1.0 + g) / g)).collect();
    let out = x_next.scale_rows(&inv).sub(&x_curr.scale_rows(&a)).sub(&h_curr.scale_rows(&b));
    if !out.all_finite() {
        return Err(Error::NonFinite { op: "naive_reverse_step_float" });
    }
    Ok(out)
}

/// First two states: `x_0` is the (possibly quantized) input and
/// `x_1 = x_0 + Q_l[h_0(x_0)]`, or the plain Euler step in float mode.
/// `h0` must be evaluated at the quantized `x_0`, not at the raw input.
pub fn bootstrap_step<S: Scalar>(
    x0_raw: &Tensor<S>,
    h0: &Tensor<S>,
    cfg: QuantConfig,
    quantize_flag: bool,
) -> Result<(State<S>, State<S>)> {
    assert_eq!(x0_raw.shape(), h0.shape(), "h0 shape disagrees with x0");
    if quantize_flag {
        let x0 = quantize(x0_raw, cfg)?;
        let x1 = x0.add(&quantize(h0, cfg)?)?;
        Ok((State::Quantized(x0), State::Quantized(x1)))
    } else {
        if !x0_raw.all_finite() {
            return Err(Error::NonFinite { op: "bootstrap_step" });
        }
        let x1 = x0_raw.add(h0);
        if !x1.all_finite() {
            return Err(Error::NonFinite { op: "bootstrap_step" });
        }
        Ok((State::Float(x0_raw.clone()), State::Float(x1)))
    }
}

/// Full forward trajectory `x_0 .. x_K` under the quantized recursion,
/// with every state and the per-block side bits `s_0 .. s_{K-2}`.
pub struct QuantTrajectory {
    pub states: Vec<QuantizedState>,
    pub side_bits: Vec<SideBits>,
}

pub fn forward_trajectory_quantized<S: Scalar>(
    x0_raw: &Tensor<S>,
    blocks: &[BlockParams<S>],
    gammas: &[Vec<f64>],
    cfg: QuantConfig,
) -> Result<QuantTrajectory> {
    assert!(!blocks.is_empty(), "at least one block required");
    assert_eq!(gammas.len(), blocks.len() - 1, "one gamma row per interior block");
    let x0 = quantize(x0_raw, cfg)?;
    let (h0, _) = block_forward(&decode::<S>(&x0), &blocks[0]);
    let x1 = x0.add(&quantize(&h0, cfg)?)?;
    let mut states = vec![x0, x1];
    let mut bits = Vec::new();
    for k in 1..blocks.len() {
        let (h, _) = block_forward(&decode::<S>(&states[k]), &blocks[k]);
        let (next, s) =
            bdia_forward_step_quantized(&states[k - 1], &states[k], &h, &gammas[k - 1])?;
        bits.push(s);
        states.push(next);
    }
    Ok(QuantTrajectory { states, side_bits: bits })
}

/// Reconstruct `x_{K-2} .. x_0` from the stored `(x_{K-1}, x_K)` pair, the
/// side bits, and the re-queried coefficients. Returns the full state list
/// `x_0 .. x_K`; every entry is bit-exact against the forward pass.
pub fn reverse_trajectory_quantized<S: Scalar>(
    x_top_prev: &QuantizedState,
    x_top: &QuantizedState,
    blocks: &[BlockParams<S>],
    gammas: &[Vec<f64>],
    bits: &[SideBits],
) -> Result<Vec<QuantizedState>> {
    let depth = blocks.len();
    assert!(depth >= 1, "at least one block required");
    assert_eq!(gammas.len(), depth - 1);
    assert_eq!(bits.len(), depth - 1);
    let mut states =
        vec![QuantizedState::zeros(x_top.shape().to_vec(), x_top.cfg()); depth + 1];
    states[depth] = x_top.clone();
    states[depth - 1] = x_top_prev.clone();
    for k in (1..depth).rev() {
        let (h, _) = block_forward(&decode::<S>(&states[k]), &blocks[k]);
        states[k - 1] =
            bdia_reverse_step(&states[k], &states[k + 1], &h, &gammas[k - 1], &bits[k - 1])?;
    }
    Ok(states)
}

/// Full forward trajectory under the float recursion.
pub fn forward_trajectory_float<S: Scalar>(
    x0_raw: &Tensor<S>,
    blocks: &[BlockParams<S>],
    gammas: &[Vec<f64>],
) -> Result<Vec<Tensor<S>>> {
    assert!(!blocks.is_empty(), "at least one block required");
    assert_eq!(gammas.len(), blocks.len() - 1, "one gamma row per interior block");
    let (h0, _) = block_forward(x0_raw, &blocks[0]);
    let mut states = vec![x0_raw.clone(), x0_raw.add(&h0)];
    for k in 1..blocks.len() {
        let (h, _) = block_forward(&states[k], &blocks[k]);
        states.push(bdia_forward_step_float(&states[k - 1], &states[k], &h, &gammas[k - 1])?);
    }
    Ok(states)
}

/// Inference over `K` blocks with a single constant coefficient.
///
/// `gamma_const == 0` with quantization is the standard quantized
/// transformer (`x_{k+1} = Q_l[x_k + h_k(x_k)]`, bootstrapped through the
/// quantized input); without quantization it is the plain residual
/// recursion. Nonzero `gamma_const` runs the float-domain averaged update
/// with that fixed coefficient — one member of the solver family.
pub fn inference_forward<S: Scalar>(
    x0_raw: &Tensor<S>,
    blocks: &[BlockParams<S>],
    gamma_const: f64,
    quantize_flag: bool,
    cfg: QuantConfig,
) -> Result<Tensor<S>> {
    assert!(!blocks.is_empty(), "at least one block required");
    assert!(gamma_const.abs() <= 0.5, "inference gamma must lie in [-0.5, 0.5]");
    if gamma_const == 0.0 {
        if quantize_flag {
            let mut x = quantize(x0_raw, cfg)?;
            let (h0, _) = block_forward(&decode::<S>(&x), &blocks[0]);
            x = x.add(&quantize(&h0, cfg)?)?;
            for p in &blocks[1..] {
                let xf = decode::<S>(&x);
                let (h, _) = block_forward(&xf, p);
                x = quantize(&xf.add(&h), cfg)?;
            }
            Ok(decode::<S>(&x))
        } else {
            let mut x = x0_raw.clone();
            for p in blocks {
                let (h, _) = block_forward(&x, p);
                x = x.add(&h);
            }
            if !x.all_finite() {
                return Err(Error::NonFinite { op: "inference_forward" });
            }
            Ok(x)
        }
    } else {
        let batch = x0_raw.shape()[0];
        let gammas = vec![gamma_const; batch];
        let (h0, _) = block_forward(x0_raw, &blocks[0]);
        let mut prev = x0_raw.clone();
        let mut curr = x0_raw.add(&h0);
        for p in &blocks[1..] {
            let (h, _) = block_forward(&curr, p);
            let next = bdia_forward_step_float(&prev, &curr, &h, &gammas)?;
            prev = curr;
            curr = next;
        }
        Ok(curr)
    }
}
