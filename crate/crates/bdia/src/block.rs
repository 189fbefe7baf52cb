//! One transformer residual branch `h(x) = f(x) + g(x + f(x))` — pre-norm
//! multi-head attention plus a pre-norm GELU FFN — with its exact VJP.
//!
//! The VJP composes the primitive VJPs in reverse forward order and returns
//! `dh/dx` contributions only; the residual-skip and averaging weights of
//! the surrounding state recursion are the caller's business.

use crate::error::{Error, Result};
use crate::ops::{
    gelu, gelu_vjp, layernorm, layernorm_vjp, mask_causal, softmax_last, softmax_vjp,
    LayerNormCache, LAYERNORM_EPS,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{
    add_bias, bias_vjp, matmul, matmul_vjp, merge_heads, split_heads, transpose_last2, Tensor,
};

#[derive(Debug, Clone)]
pub struct BlockParams<S: Scalar> {
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub n_heads: usize,
    pub causal: bool,
}

impl<S: Scalar> BlockParams<S> {
    pub fn width(&self) -> usize {
        self.ln1_gain.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.n_heads
    }

    pub fn zeros_like(&self) -> Self {
        BlockParams {
            ln1_gain: self.ln1_gain.zeros_like(),
            ln1_bias: self.ln1_bias.zeros_like(),
            wq: self.wq.zeros_like(),
            bq: self.bq.zeros_like(),
            wk: self.wk.zeros_like(),
            bk: self.bk.zeros_like(),
            wv: self.wv.zeros_like(),
            bv: self.bv.zeros_like(),
            wo: self.wo.zeros_like(),
            bo: self.bo.zeros_like(),
            ln2_gain: self.ln2_gain.zeros_like(),
            ln2_bias: self.ln2_bias.zeros_like(),
            w1: self.w1.zeros_like(),
            b1: self.b1.zeros_like(),
            w2: self.w2.zeros_like(),
            b2: self.b2.zeros_like(),
            n_heads: self.n_heads,
            causal: self.causal,
        }
    }

    /// Tensors in a fixed order; names are stable and used by checkpoints.
    pub fn visit(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn visit_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        vec![
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn add_assign(&mut self, other: &BlockParams<S>) {
        for ((_, a), (_, b)) in self.visit_mut().into_iter().zip(other.visit()) {
            a.add_assign(b);
        }
    }
}

/// Intermediates of one `block_forward`, consumed by [`block_vjp`].
/// Produced and used within a single block's backward step; never retained
/// across blocks.
pub struct TapeFrame<S: Scalar> {
    ln1: LayerNormCache<S>,
    xn1: Tensor<S>,
    qh: Tensor<S>,
    kh: Tensor<S>,
    vh: Tensor<S>,
    probs: Tensor<S>,
    ctx_merged: Tensor<S>,
    ln2: LayerNormCache<S>,
    xn2: Tensor<S>,
    z1: Tensor<S>,
    a1: Tensor<S>,
}

impl<S: Scalar> TapeFrame<S> {
    /// Total float elements held, for the memory ledger's breakdown.
    pub fn element_count(&self) -> usize {
        self.ln1.xhat.len()
            + self.ln1.inv_std.len()
            + self.xn1.len()
            + self.qh.len()
            + self.kh.len()
            + self.vh.len()
            + self.probs.len()
            + self.ctx_merged.len()
            + self.ln2.xhat.len()
            + self.ln2.inv_std.len()
            + self.xn2.len()
            + self.z1.len()
            + self.a1.len()
    }
}

/// Residual branch of one block: `h = f(x) + g(x + f(x))` where `f` is
/// pre-norm attention and `g` the pre-norm FFN. Deterministic given
/// `(x, params)`; two calls produce identical bits.
pub fn block_forward<S: Scalar>(x: &Tensor<S>, p: &BlockParams<S>) -> (Tensor<S>, TapeFrame<S>) {
    assert_eq!(x.ndim(), 3, "block_forward expects [batch, seq, width]");
    let d = p.width();
    assert_eq!(x.shape()[2], d, "block_forward: input width mismatch");

    // f(x): pre-norm multi-head attention.
    let (xn1, ln1) = layernorm(x, &p.ln1_gain, &p.ln1_bias, LAYERNORM_EPS);
    let q = add_bias(&matmul(&xn1, &p.wq), &p.bq);
    let k = add_bias(&matmul(&xn1, &p.wk), &p.bk);
    let v = add_bias(&matmul(&xn1, &p.wv), &p.bv);
    let qh = split_heads(&q, p.n_heads);
    let kh = split_heads(&k, p.n_heads);
    let vh = split_heads(&v, p.n_heads);
    let inv_sqrt_hd = S::from_f64(1.0 / (p.head_dim() as f64).sqrt());
    let mut scores = matmul(&qh, &transpose_last2(&kh)).scale(inv_sqrt_hd);
    if p.causal {
        mask_causal(&mut scores);
    }
    let probs = softmax_last(&scores);
    let ctx_merged = merge_heads(&matmul(&probs, &vh));
    let attn = add_bias(&matmul(&ctx_merged, &p.wo), &p.bo);

    // g(x + f(x)): pre-norm FFN on the inner residual.
    let u = x.add(&attn);
    let (xn2, ln2) = layernorm(&u, &p.ln2_gain, &p.ln2_bias, LAYERNORM_EPS);
    let z1 = add_bias(&matmul(&xn2, &p.w1), &p.b1);
    let a1 = gelu(&z1);
    let ffn = add_bias(&matmul(&a1, &p.w2), &p.b2);

    let h = attn.add(&ffn);
    (h, TapeFrame { ln1, xn1, qh, kh, vh, probs, ctx_merged, ln2, xn2, z1, a1 })
}

/// Exact VJP of [`block_forward`]: given `d loss / d h`, returns
/// `(d loss / d x, d loss / d params)` for this block's own `h(x)` only.
pub fn block_vjp<S: Scalar>(
    frame: &TapeFrame<S>,
    p: &BlockParams<S>,
    grad_h: &Tensor<S>,
) -> (Tensor<S>, BlockParams<S>) {
    assert_eq!(
        frame.xn1.shape(),
        grad_h.shape(),
        "stale frame: gradient shape does not match the recorded forward"
    );
    let d = p.width();
    let mut grads = p.zeros_like();

    // FFN path: h takes ffn directly.
    let (g_a1, g_w2) = matmul_vjp(&frame.a1, &p.w2, grad_h);
    grads.w2 = g_w2;
    grads.b2 = bias_vjp(grad_h, d);
    let g_z1 = gelu_vjp(&frame.z1, &g_a1);
    let (g_xn2, g_w1) = matmul_vjp(&frame.xn2, &p.w1, &g_z1);
    grads.w1 = g_w1;
    grads.b1 = bias_vjp(&g_z1, p.b1.shape()[0]);
    let (g_u, g_ln2_gain, g_ln2_bias) = layernorm_vjp(&frame.ln2, &p.ln2_gain, &g_xn2);
    grads.ln2_gain = g_ln2_gain;
    grads.ln2_bias = g_ln2_bias;

    // u = x + attn: the inner residual feeds grad_x directly, and attn
    // collects gradient from both h and u.
    let mut grad_x = g_u.clone();
    let g_attn = grad_h.add(&g_u);

    // Attention output projection.
    let (g_ctx_merged, g_wo) = matmul_vjp(&frame.ctx_merged, &p.wo, &g_attn);
    grads.wo = g_wo;
    grads.bo = bias_vjp(&g_attn, d);
    let g_ctx = split_heads(&g_ctx_merged, p.n_heads);
    let (g_probs, g_vh) = matmul_vjp(&frame.probs, &frame.vh, &g_ctx);
    let inv_sqrt_hd = S::from_f64(1.0 / (p.head_dim() as f64).sqrt());
    let g_scores = softmax_vjp(&frame.probs, &g_probs).scale(inv_sqrt_hd);
    let (g_qh, g_kht) = matmul_vjp(&frame.qh, &transpose_last2(&frame.kh), &g_scores);
    let g_kh = transpose_last2(&g_kht);

    let g_q = merge_heads(&g_qh);
    let g_k = merge_heads(&g_kh);
    let g_v = merge_heads(&g_vh);
    let (g_xn1_q, g_wq) = matmul_vjp(&frame.xn1, &p.wq, &g_q);
    let (g_xn1_k, g_wk) = matmul_vjp(&frame.xn1, &p.wk, &g_k);
    let (g_xn1_v, g_wv) = matmul_vjp(&frame.xn1, &p.wv, &g_v);
    grads.wq = g_wq;
    grads.bq = bias_vjp(&g_q, d);
    grads.wk = g_wk;
    grads.bk = bias_vjp(&g_k, d);
    grads.wv = g_wv;
    grads.bv = bias_vjp(&g_v, d);

    let g_xn1 = g_xn1_q.add(&g_xn1_k).add(&g_xn1_v);
    let (g_x_ln1, g_ln1_gain, g_ln1_bias) = layernorm_vjp(&frame.ln1, &p.ln1_gain, &g_xn1);
    grads.ln1_gain = g_ln1_gain;
    grads.ln1_bias = g_ln1_bias;
    grad_x.add_assign(&g_x_ln1);

    (grad_x, grads)
}

/// Truncated-normal (std 0.02, clipped at two sigma) projection weights,
/// unit norm gains, zero biases. Deterministic given the rng.
pub fn init_params<S: Scalar>(
    rng: &mut Rng,
    d: usize,
    n_heads: usize,
    ffn_mult: usize,
    causal: bool,
) -> Result<BlockParams<S>> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config {
            line: None,
            message: format!("head count {n_heads} must divide model width {d}"),
        });
    }
    if ffn_mult == 0 {
        return Err(Error::Config { line: None, message: "ffn_mult must be >= 1".into() });
    }
    let f = d * ffn_mult;
    let mut w = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| S::from_f64(rng.truncated_normal(0.02))).collect();
        Tensor::new(vec![rows, cols], data)
    };
    let wq = w(d, d);
    let wk = w(d, d);
    let wv = w(d, d);
    let wo = w(d, d);
    let w1 = w(d, f);
    let w2 = w(f, d);
    let ones = Tensor::new(vec![d], vec![S::one(); d]);
    Ok(BlockParams {
        ln1_gain: ones.clone(),
        ln1_bias: Tensor::zeros(vec![d]),
        wq,
        bq: Tensor::zeros(vec![d]),
        wk,
        bk: Tensor::zeros(vec![d]),
        wv,
        bv: Tensor::zeros(vec![d]),
        wo,
        bo: Tensor::zeros(vec![d]),
        ln2_gain: ones,
        ln2_bias: Tensor::zeros(vec![d]),
        w1,
        b1: Tensor::zeros(vec![f]),
        w2,
        b2: Tensor::zeros(vec![d]),
        n_heads,
        causal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(rng: &mut Rng, b: usize, t: usize, d: usize) -> Tensor<f64> {
        let data = (0..b * t * d).map(|_| rng.normal()).collect();
        Tensor::new(vec![b, t, d], data)
    }

    #[test]
    fn zero_weights_and_gains_give_zero_branch() {
        let mut rng = Rng::new(1);
        let p = init_params::<f64>(&mut rng, 8, 2, 4, false).unwrap();
        let mut zeroed = p.zeros_like();
        zeroed.n_heads = 2;
        let x = random_input(&mut rng, 2, 3, 8);
        let (h, _) = block_forward(&x, &zeroed);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_is_not_the_identity() {
        let mut rng = Rng::new(2);
        let p = init_params::<f64>(&mut rng, 8, 2, 4, false).unwrap();
        let x = random_input(&mut rng, 1, 4, 8);
        let (h, _) = block_forward(&x, &p);
        let diff: f64 = h.sub(&x).data().iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-3, "h(x) should differ from x, diff = {diff}");
    }

    #[test]
    fn forward_and_backward_are_bitwise_repeatable() {
        let mut rng = Rng::new(3);
        let p = init_params::<f32>(&mut rng, 16, 4, 4, true).unwrap();
        let data: Vec<f32> = (0..2 * 5 * 16).map(|_| rng.normal() as f32).collect();
        let x = Tensor::new(vec![2, 5, 16], data);
        let (h1, f1) = block_forward(&x, &p);
        let (h2, f2) = block_forward(&x, &p);
        assert!(h1.data().iter().zip(h2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let go = h1.map(|v| v * 0.25 + 0.1);
        let (gx1, gp1) = block_vjp(&f1, &p, &go);
        let (gx2, gp2) = block_vjp(&f2, &p, &go);
        assert!(gx1.data().iter().zip(gx2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        for ((_, a), (_, b)) in gp1.visit().into_iter().zip(gp2.visit()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn same_seed_gives_identical_params_and_head_dims() {
        let p1 = init_params::<f64>(&mut Rng::new(9), 8, 2, 4, false).unwrap();
        let p2 = init_params::<f64>(&mut Rng::new(9), 8, 2, 4, false).unwrap();
        assert_eq!(p1.head_dim(), 4);
        for ((_, a), (_, b)) in p1.visit().into_iter().zip(p2.visit()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn head_count_must_divide_width() {
        assert!(init_params::<f64>(&mut Rng::new(0), 8, 3, 4, false).is_err());
        assert!(init_params::<f64>(&mut Rng::new(0), 8, 0, 4, false).is_err());
    }

    #[test]
    fn causal_output_ignores_future_positions() {
        let mut rng = Rng::new(4);
        let p = init_params::<f64>(&mut rng, 8, 2, 4, true).unwrap();
        let x = random_input(&mut rng, 1, 6, 8);
        let (h, _) = block_forward(&x, &p);
        // Perturb position 4; outputs at positions < 4 must be unchanged.
        let mut x2 = x.clone();
        for j in 0..8 {
            x2.data_mut()[4 * 8 + j] += 0.7;
        }
        let (h2, _) = block_forward(&x2, &p);
        for t in 0..4 {
            for j in 0..8 {
                assert_eq!(h.data()[t * 8 + j], h2.data()[t * 8 + j], "position {t} changed");
            }
        }
        // And some later position does change.
        assert!(h.data()[4 * 8..].iter().zip(&h2.data()[4 * 8..]).any(|(a, b)| a != b));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_vjp() {
        let mut rng = Rng::new(5);
        let p = init_params::<f64>(&mut rng, 8, 2, 2, false).unwrap();
        let x = random_input(&mut rng, 1, 3, 8);
        let (h, frame) = block_forward(&x, &p);
        let (gx, gp) = block_vjp(&frame, &p, &h.zeros_like());
        assert!(gx.data().iter().all(|&v| v == 0.0));
        for (_, t) in gp.visit() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    #[should_panic(expected = "stale frame")]
    fn mismatched_frame_panics() {
        let mut rng = Rng::new(6);
        let p = init_params::<f64>(&mut rng, 8, 2, 2, false).unwrap();
        let x = random_input(&mut rng, 1, 3, 8);
        let (_, frame) = block_forward(&x, &p);
        let bad = Tensor::<f64>::zeros(vec![1, 4, 8]);
        block_vjp(&frame, &p, &bad);
    }

    /// Central finite differences over every parameter tensor and the input.
    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = Rng::new(7);
        let (b, t, d) = (2, 4, 8);
        let p = init_params::<f64>(&mut rng, d, 2, 4, true).unwrap();
        let x = random_input(&mut rng, b, t, d);
        let w: Vec<f64> = (0..b * t * d).map(|_| rng.normal()).collect();
        let w = Tensor::new(vec![b, t, d], w);

        let loss = |p: &BlockParams<f64>, x: &Tensor<f64>| -> f64 {
            let (h, _) = block_forward(x, p);
            h.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };

        let (_, frame) = block_forward(&x, &p);
        let (gx, gp) = block_vjp(&frame, &p, &w);

        let step = 1e-5;
        let tol = 1e-4;
        // Input gradient.
        let mut max_rel = 0.0f64;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += step;
            let mut xm = x.clone();
            xm.data_mut()[i] -= step;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * step);
            let a = gx.data()[i];
            max_rel = max_rel.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
        }
        assert!(max_rel <= tol, "input grad rel err {max_rel}");

        // Every parameter tensor.
        let names: Vec<&str> = p.visit().iter().map(|(n, _)| *n).collect();
        for (pi, name) in names.iter().enumerate() {
            let analytic = gp.visit()[pi].1.clone();
            let n = analytic.len();
            let mut max_rel = 0.0f64;
            for i in 0..n {
                let mut pp = p.clone();
                pp.visit_mut()[pi].1.data_mut()[i] += step;
                let mut pm = p.clone();
                pm.visit_mut()[pi].1.data_mut()[i] -= step;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * step);
                let a = analytic.data()[i];
                max_rel = max_rel.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
            }
            assert!(max_rel <= tol, "{name} grad rel err {max_rel}");
        }
    }
}
