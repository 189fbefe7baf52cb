//! Nonlinear primitives with hand-written vector-Jacobian products.
//!
//! Each forward returns whatever its VJP needs; there is no tape or graph.
//! The trainer composes these by hand per block, which is what lets the
//! reversible engine decide exactly what is stored versus recomputed.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{debug_assert_finite, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Normalization cache: normalized values and per-row inverse std.
pub struct LayerNormCache<S: Scalar> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
}

/// Layer normalization over the last axis, then affine `gain * xhat + bias`.
pub fn layernorm<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: f64,
) -> (Tensor<S>, LayerNormCache<S>) {
    let d = *x.shape().last().expect("layernorm needs at least one axis");
    assert!(d > 0, "layernorm: degenerate axis of length 0");
    assert_eq!(gain.shape(), [d], "layernorm: gain shape mismatch");
    assert_eq!(bias.shape(), [d], "layernorm: bias shape mismatch");

    let rows = x.len() / d;
    let inv_d = S::from_f64(1.0 / d as f64);
    let eps = S::from_f64(eps);
    let mut xhat = vec![S::zero(); x.len()];
    let mut out = vec![S::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let istd = (var + eps).sqrt().recip();
        inv_std.push(istd);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * istd;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out);
    debug_assert_finite(&out, "layernorm");
    (out, LayerNormCache { xhat: Tensor::new(x.shape().to_vec(), xhat), inv_std })
}

pub fn layernorm_vjp<S: Scalar>(
    cache: &LayerNormCache<S>,
    gain: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let d = *cache.xhat.shape().last().unwrap();
    assert_eq!(cache.xhat.shape(), grad_out.shape(), "layernorm_vjp: shape mismatch");
    let rows = cache.xhat.len() / d;
    let inv_d = S::from_f64(1.0 / d as f64);

    let mut grad_x = vec![S::zero(); grad_out.len()];
    let mut grad_gain = vec![S::zero(); d];
    let mut grad_bias = vec![S::zero(); d];
    for r in 0..rows {
        let xh = &cache.xhat.data()[r * d..(r + 1) * d];
        let go = &grad_out.data()[r * d..(r + 1) * d];
        let istd = cache.inv_std[r];
        // dg = go * gain; dx = istd * (dg - mean(dg) - xhat * mean(dg * xhat))
        let mut mean_dg = S::zero();
        let mut mean_dg_xh = S::zero();
        for j in 0..d {
            let dg = go[j] * gain.data()[j];
            mean_dg = mean_dg + dg;
            mean_dg_xh = mean_dg_xh + dg * xh[j];
            grad_gain[j] = grad_gain[j] + go[j] * xh[j];
            grad_bias[j] = grad_bias[j] + go[j];
        }
        mean_dg = mean_dg * inv_d;
        mean_dg_xh = mean_dg_xh * inv_d;
        for j in 0..d {
            let dg = go[j] * gain.data()[j];
            grad_x[r * d + j] = istd * (dg - mean_dg - xh[j] * mean_dg_xh);
        }
    }
    (
        Tensor::new(grad_out.shape().to_vec(), grad_x),
        Tensor::new(vec![d], grad_gain),
        Tensor::new(vec![d], grad_bias),
    )
}

/// Softmax over the last axis with max-subtraction. Rows may contain
/// `-inf` (masked scores); those positions get probability zero.
pub fn softmax_last<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let d = *x.shape().last().expect("softmax needs at least one axis");
    assert!(d > 0, "softmax: degenerate axis of length 0");
    let mut out = vec![S::zero(); x.len()];
    for (r, row) in x.data().chunks_exact(d).enumerate() {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = Scalar::exp(v - max);
            out[r * d + j] = e;
            sum = sum + e;
        }
        let inv = sum.recip();
        for j in 0..d {
            out[r * d + j] = out[r * d + j] * inv;
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out);
    debug_assert_finite(&out, "softmax");
    out
}

/// VJP of softmax given its own output: `dx = y * (go - sum(go * y))`.
pub fn softmax_vjp<S: Scalar>(y: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    assert_eq!(y.shape(), grad_out.shape(), "softmax_vjp: shape mismatch");
    let d = *y.shape().last().unwrap();
    let mut grad = vec![S::zero(); y.len()];
    for r in 0..y.len() / d {
        let yr = &y.data()[r * d..(r + 1) * d];
        let go = &grad_out.data()[r * d..(r + 1) * d];
        let dot = yr.iter().zip(go).map(|(&a, &b)| a * b).sum::<S>();
        for j in 0..d {
            grad[r * d + j] = yr[j] * (go[j] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), grad)
}

/// Exact-erf GELU: `0.5 * x * (1 + erf(x / sqrt(2)))`.
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let half = S::from_f64(0.5);
    let out = x.map(|v| half * v * (S::one() + Scalar::erf(v * inv_sqrt2)));
    debug_assert_finite(&out, "gelu");
    out
}

/// VJP of [`gelu`] against its input: `Phi(x) + x * phi(x)`.
pub fn gelu_vjp<S: Scalar>(x: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    assert_eq!(x.shape(), grad_out.shape(), "gelu_vjp: shape mismatch");
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let half = S::from_f64(0.5);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let cdf = half * (S::one() + Scalar::erf(v * inv_sqrt2));
            let pdf = inv_sqrt_2pi * Scalar::exp(-half * v * v);
            g * (cdf + v * pdf)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Set scores above the diagonal of the last two axes to `-inf`, so position
/// `t` attends only to positions `<= t`.
pub fn mask_causal<S: Scalar>(scores: &mut Tensor<S>) {
    let ndim = scores.ndim();
    assert!(ndim >= 2, "mask_causal needs >= 2 axes");
    let (r, c) = (scores.shape()[ndim - 2], scores.shape()[ndim - 1]);
    assert_eq!(r, c, "mask_causal expects square score matrices");
    let neg_inf = S::neg_infinity();
    for slab in scores.data_mut().chunks_exact_mut(r * c) {
        for i in 0..r {
            for v in &mut slab[i * c + i + 1..(i + 1) * c] {
                *v = neg_inf;
            }
        }
    }
}

/// Mean negative log-softmax of the target class over scored rows.
///
/// `targets[i] == IGNORE_TARGET` drops row `i` from both loss and gradient;
/// the gradient on scored rows is `(softmax - onehot) / count`.
pub const IGNORE_TARGET: i64 = -1;

pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[i64]) -> Result<(S, Tensor<S>)> {
    assert_eq!(logits.ndim(), 2, "cross_entropy expects [rows, classes]");
    let (rows, classes) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(rows, targets.len(), "cross_entropy: one target per row");

    let count = targets.iter().filter(|&&t| t != IGNORE_TARGET).count();
    let mut grad = vec![S::zero(); logits.len()];
    if count == 0 {
        return Ok((S::zero(), Tensor::new(logits.shape().to_vec(), grad)));
    }
    let inv_count = S::from_f64(1.0 / count as f64);
    let mut loss = S::zero();
    for (r, &target) in targets.iter().enumerate() {
        if target == IGNORE_TARGET {
            continue;
        }
        if target < 0 || target as usize >= classes {
            return Err(Error::IndexOutOfRange { index: target, len: classes });
        }
        let row = &logits.data()[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for &v in row {
            sum = sum + Scalar::exp(v - max);
        }
        let log_z = Scalar::ln(sum) + max;
        loss = loss + (log_z - row[target as usize]);
        let inv_sum = sum.recip();
        for j in 0..classes {
            let p = Scalar::exp(row[j] - max) * inv_sum;
            grad[r * classes + j] = p * inv_count;
        }
        grad[r * classes + target as usize] =
            grad[r * classes + target as usize] - inv_count;
    }
    Ok((loss * inv_count, Tensor::new(logits.shape().to_vec(), grad)))
}
