//! Dense row-major tensors and the linear-algebra primitives the
//! transformer block is built from.
//!
//! Reductions run in a fixed sequential order (the k-loop of a matmul walks
//! k ascending for every output element), so repeated evaluations are
//! bitwise identical — the property the reversible trainer's gradient
//! equivalence rests on. Shape violations are programmer errors and panic.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape mismatch: {:?} does not cover {} elements",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); len] }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Self {
        Tensor::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn scalar_value(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn zeros_like(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: vec![S::zero(); self.data.len()] }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape shape mismatch: {:?} for {} elements",
            shape,
            self.data.len()
        );
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor<S>) -> Self {
        assert_eq!(self.shape, other.shape, "add: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn sub(&self, other: &Tensor<S>) -> Self {
        assert_eq!(self.shape, other.shape, "sub: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "add_assign: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor<S>, c: S) {
        assert_eq!(self.shape, other.shape, "add_assign_scaled: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b * c;
        }
    }

    /// Multiply every element of row `b` (leading axis) by `factors[b]`.
    pub fn scale_rows(&self, factors: &[S]) -> Self {
        assert!(!self.shape.is_empty(), "scale_rows needs at least one axis");
        assert_eq!(self.shape[0], factors.len(), "scale_rows: factor count mismatch");
        let row = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(self.data.len());
        for (b, &f) in factors.iter().enumerate() {
            data.extend(self.data[b * row..(b + 1) * row].iter().map(|&v| v * f));
        }
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.to_f64().abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn debug_assert_finite<S: Scalar>(t: &Tensor<S>, op: &str) {
    debug_assert!(t.all_finite(), "{op}: non-finite element produced");
}

/// `c += a @ b` on row-major 2-D slices. The j-loop carries independent
/// accumulators, so the compiler may vectorize it while every `c[i,j]` still
/// sums its k-terms in ascending order.
fn matmul_2d_accumulate<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_ip * b_pj;
            }
        }
    }
}

/// Matrix product. Two forms:
/// - `a: [..., m, k] @ b: [k, n]` — shared right operand (linear layers);
/// - `a: [batch..., m, k] @ b: [batch..., k, n]` with identical leading
///   dims — per-slice product (attention).
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert!(a.ndim() >= 2, "matmul: lhs must have >= 2 axes");
    let (m, k) = (a.shape[a.ndim() - 2], a.shape[a.ndim() - 1]);
    if b.ndim() == 2 {
        assert_eq!(k, b.shape[0], "matmul: inner dimensions {k} vs {} disagree", b.shape[0]);
        let n = b.shape[1];
        let rows = a.data.len() / k;
        let mut out = vec![S::zero(); rows * n];
        matmul_2d_accumulate(&mut out, &a.data, &b.data, rows, k, n);
        let mut shape = a.shape.clone();
        *shape.last_mut().unwrap() = n;
        let t = Tensor { shape, data: out };
        debug_assert_finite(&t, "matmul");
        t
    } else {
        assert_eq!(a.ndim(), b.ndim(), "matmul: rank mismatch");
        assert_eq!(
            a.shape[..a.ndim() - 2],
            b.shape[..b.ndim() - 2],
            "matmul: batch dimensions disagree"
        );
        assert_eq!(k, b.shape[b.ndim() - 2], "matmul: inner dimensions disagree");
        let n = b.shape[b.ndim() - 1];
        let batches: usize = a.shape[..a.ndim() - 2].iter().product();
        let mut out = vec![S::zero(); batches * m * n];
        for t in 0..batches {
            matmul_2d_accumulate(
                &mut out[t * m * n..(t + 1) * m * n],
                &a.data[t * m * k..(t + 1) * m * k],
                &b.data[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let mut shape = a.shape[..a.ndim() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let t = Tensor { shape, data: out };
        debug_assert_finite(&t, "matmul");
        t
    }
}

/// Gradients of `matmul(a, b)` for same-rank operands:
/// `grad_a = grad_out @ b^T`, `grad_b = a^T @ grad_out`. For a 2-D `b`
/// shared across a batched `a`, `grad_b` sums over all leading rows.
pub fn matmul_vjp<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    if b.ndim() == 2 {
        let k = *a.shape.last().unwrap();
        let rows = a.data.len() / k;
        let a2 = Tensor { shape: vec![rows, k], data: a.data.clone() };
        let g2 = Tensor { shape: vec![rows, b.shape[1]], data: grad_out.data.clone() };
        let grad_a = matmul(&g2, &transpose_last2(b)).reshape(a.shape.clone());
        let grad_b = matmul(&transpose_last2(&a2), &g2);
        (grad_a, grad_b)
    } else {
        let grad_a = matmul(grad_out, &transpose_last2(b));
        let grad_b = matmul(&transpose_last2(a), grad_out);
        (grad_a, grad_b)
    }
}

/// Swap the last two axes (materialized).
pub fn transpose_last2<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    assert!(t.ndim() >= 2, "transpose_last2 needs >= 2 axes");
    let (r, c) = (t.shape[t.ndim() - 2], t.shape[t.ndim() - 1]);
    let batches: usize = t.shape[..t.ndim() - 2].iter().product();
    let mut data = vec![S::zero(); t.data.len()];
    for bt in 0..batches {
        let src = &t.data[bt * r * c..(bt + 1) * r * c];
        let dst = &mut data[bt * r * c..(bt + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = t.shape.clone();
    shape.swap(t.ndim() - 2, t.ndim() - 1);
    Tensor { shape, data }
}

/// Broadcast-add a vector over the last axis.
pub fn add_bias<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Tensor<S> {
    assert_eq!(bias.ndim(), 1, "add_bias: bias must be 1-D");
    let n = bias.shape[0];
    assert_eq!(*x.shape.last().unwrap(), n, "add_bias: trailing axis mismatch");
    let mut data = Vec::with_capacity(x.data.len());
    for row in x.data.chunks_exact(n) {
        data.extend(row.iter().zip(&bias.data).map(|(&a, &b)| a + b));
    }
    Tensor { shape: x.shape.clone(), data }
}

/// Gradient of [`add_bias`] wrt the bias: sum over all leading rows.
pub fn bias_vjp<S: Scalar>(grad_out: &Tensor<S>, n: usize) -> Tensor<S> {
    let mut acc = vec![S::zero(); n];
    for row in grad_out.data.chunks_exact(n) {
        for (a, &g) in acc.iter_mut().zip(row) {
            *a = *a + g;
        }
    }
    Tensor { shape: vec![n], data: acc }
}

/// `[B, T, D] -> [B, H, T, D/H]`.
pub fn split_heads<S: Scalar>(x: &Tensor<S>, heads: usize) -> Tensor<S> {
    assert_eq!(x.ndim(), 3, "split_heads expects [B, T, D]");
    let (b, t, d) = (x.shape[0], x.shape[1], x.shape[2]);
    assert_eq!(d % heads, 0, "head count {heads} must divide width {d}");
    let hd = d / heads;
    let mut data = vec![S::zero(); x.data.len()];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let src = bi * t * d + ti * d + h * hd;
                let dst = ((bi * heads + h) * t + ti) * hd;
                data[dst..dst + hd].copy_from_slice(&x.data[src..src + hd]);
            }
        }
    }
    Tensor { shape: vec![b, heads, t, hd], data }
}

/// `[B, H, T, D/H] -> [B, T, D]`, inverse of [`split_heads`].
pub fn merge_heads<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    assert_eq!(x.ndim(), 4, "merge_heads expects [B, H, T, Dh]");
    let (b, heads, t, hd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let d = heads * hd;
    let mut data = vec![S::zero(); x.data.len()];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let src = ((bi * heads + h) * t + ti) * hd;
                let dst = bi * t * d + ti * d + h * hd;
                data[dst..dst + hd].copy_from_slice(&x.data[src..src + hd]);
            }
        }
    }
    Tensor { shape: vec![b, t, d], data }
}
