//! Fixed-point activation quantization.
//!
//! States live on the grid of multiples of `2^-l` and are stored as scaled
//! signed integers (`value = n * 2^-l`). All combination arithmetic the
//! reversible update needs (halving with a parity bit, doubling, add,
//! subtract) happens in the integer domain and is therefore exact; floats
//! only appear inside the transformer block itself.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Quantization parameters: grid step `2^-l`, range bound `|x| < 2^range_exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    l: u32,
    range_exp: u32,
}

impl QuantConfig {
    /// `l + range_exp <= 24` keeps every representable value (and the
    /// intermediate doubling + addition of the reversible update) exact in
    /// an i32 and exactly decodable to f32.
    pub fn new(l: u32, range_exp: u32) -> Result<Self> {
        if l < 1 {
            return Err(Error::InvalidQuantConfig { l, range_exp, reason: "l must be >= 1" });
        }
        if range_exp < 1 {
            return Err(Error::InvalidQuantConfig {
                l,
                range_exp,
                reason: "range_exp must be >= 1",
            });
        }
        if l + range_exp > 24 {
            return Err(Error::InvalidQuantConfig {
                l,
                range_exp,
                reason: "l + range_exp must be <= 24",
            });
        }
        Ok(QuantConfig { l, range_exp })
    }

    pub fn l(&self) -> u32 {
        self.l
    }

    pub fn range_exp(&self) -> u32 {
        self.range_exp
    }

    /// Grid step `2^-l`.
    pub fn step(&self) -> f64 {
        (self.l as f64).exp2().recip()
    }

    /// Exclusive bound on the scaled integers: `2^(l + range_exp)`.
    pub fn int_limit(&self) -> i64 {
        1i64 << (self.l + self.range_exp)
    }

    /// Exclusive bound on represented values: `2^range_exp`.
    pub fn value_limit(&self) -> f64 {
        (self.range_exp as f64).exp2()
    }
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { l: 9, range_exp: 14 }
    }
}

/// An activation tensor on the `2^-l` grid, stored as scaled integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedState {
    shape: Vec<usize>,
    data: Vec<i32>,
    cfg: QuantConfig,
}

impl QuantizedState {
    /// Build from raw scaled integers, enforcing the range invariant.
    pub fn from_ints(shape: Vec<usize>, data: Vec<i32>, cfg: QuantConfig) -> Result<Self> {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape mismatch: shape {:?} does not cover {} elements",
            shape,
            data.len()
        );
        let limit = cfg.int_limit();
        for &n in &data {
            if (n as i64).abs() >= limit {
                return Err(Error::RangeOverflow {
                    op: "from_ints",
                    value: n as f64 * cfg.step(),
                    limit: cfg.value_limit(),
                });
            }
        }
        Ok(QuantizedState { shape, data, cfg })
    }

    pub fn zeros(shape: Vec<usize>, cfg: QuantConfig) -> Self {
        let len = shape.iter().product();
        QuantizedState { shape, data: vec![0; len], cfg }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ints(&self) -> &[i32] {
        &self.data
    }

    pub fn cfg(&self) -> QuantConfig {
        self.cfg
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elementwise add, exact on the grid.
    pub fn add(&self, other: &QuantizedState) -> Result<QuantizedState> {
        self.combine(other, "add", |a, b| a + b)
    }

    /// Elementwise subtract, exact on the grid.
    pub fn sub(&self, other: &QuantizedState) -> Result<QuantizedState> {
        self.combine(other, "sub", |a, b| a - b)
    }

    /// Multiply by two, exact on the grid.
    pub fn double(&self) -> Result<QuantizedState> {
        let limit = self.cfg.int_limit();
        let mut data = Vec::with_capacity(self.data.len());
        for &n in &self.data {
            let d = 2 * n as i64;
            if d.abs() >= limit {
                return Err(Error::RangeOverflow {
                    op: "double",
                    value: d as f64 * self.cfg.step(),
                    limit: self.cfg.value_limit(),
                });
            }
            data.push(d as i32);
        }
        Ok(QuantizedState { shape: self.shape.clone(), data, cfg: self.cfg })
    }

    fn combine(
        &self,
        other: &QuantizedState,
        op: &'static str,
        f: impl Fn(i64, i64) -> i64,
    ) -> Result<QuantizedState> {
        assert_eq!(self.shape, other.shape, "{op}: shape mismatch");
        assert_eq!(self.cfg, other.cfg, "{op}: quantization config mismatch");
        let limit = self.cfg.int_limit();
        let mut data = Vec::with_capacity(self.data.len());
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let n = f(a as i64, b as i64);
            if n.abs() >= limit {
                return Err(Error::RangeOverflow {
                    op,
                    value: n as f64 * self.cfg.step(),
                    limit: self.cfg.value_limit(),
                });
            }
            data.push(n as i32);
        }
        Ok(QuantizedState { shape: self.shape.clone(), data, cfg: self.cfg })
    }
}

/// One parity bit per element of a state, packed LSB-first into bytes
/// (bit `m` lives in byte `m / 8`, position `m % 8`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideBits {
    bits: Vec<u8>,
    len: usize,
    block_index: usize,
}

impl SideBits {
    pub fn get(&self, m: usize) -> u8 {
        debug_assert!(m < self.len);
        (self.bits[m >> 3] >> (m & 7)) & 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index of the state `x_{k-1}` these bits describe.
    pub fn block_index(&self) -> usize {
        self.block_index
    }

    pub fn byte_len(&self) -> usize {
        self.bits.len()
    }

    /// Packed little-endian bytes, element-major order.
    pub fn to_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn from_bytes(bytes: &[u8], len: usize, block_index: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Checkpoint(format!(
                "side bits for {len} elements need {} bytes, got {}",
                len.div_ceil(8),
                bytes.len()
            )));
        }
        // Trailing padding bits must be zero so serialization is canonical.
        if len % 8 != 0 {
            if let Some(&last) = bytes.last() {
                if last >> (len % 8) != 0 {
                    return Err(Error::Checkpoint("nonzero padding in side bits".to_string()));
                }
            }
        }
        Ok(SideBits { bits: bytes.to_vec(), len, block_index })
    }
}

/// Round to the `2^-l` grid: `round[y / 2^-l] * 2^-l` with ties to even.
///
/// Errors with `RangeOverflow` if any `|y| >= 2^range_exp` and `NonFinite`
/// on NaN/infinity.
pub fn quantize<S: Scalar>(y: &Tensor<S>, cfg: QuantConfig) -> Result<QuantizedState> {
    let scale = (cfg.l as f64).exp2();
    let limit = cfg.int_limit();
    let mut data = Vec::with_capacity(y.len());
    for &v in y.data() {
        let v = v.to_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "quantize" });
        }
        // Multiplying by a power of two is exact, so the tie cases seen by
        // round_ties_even are exactly the values halfway between grid points.
        let n = (v * scale).round_ties_even() as i64;
        if n.abs() >= limit {
            return Err(Error::RangeOverflow {
                op: "quantize",
                value: v,
                limit: cfg.value_limit(),
            });
        }
        data.push(n as i32);
    }
    Ok(QuantizedState { shape: y.shape().to_vec(), data, cfg })
}

/// Parity of each scaled integer: bit `m` is `n[m] mod 2` with the
/// mathematical modulus, so negative odd values also map to 1.
pub fn side_bits(x: &QuantizedState) -> SideBits {
    let mut bits = vec![0u8; x.data.len().div_ceil(8)];
    for (m, &n) in x.data.iter().enumerate() {
        bits[m >> 3] |= ((n & 1) as u8 & 1) << (m & 7);
    }
    SideBits { bits, len: x.data.len(), block_index: 0 }
}

/// Like [`side_bits`] but tagged with the index of the state it describes.
pub fn side_bits_for_block(x: &QuantizedState, block_index: usize) -> SideBits {
    let mut s = side_bits(x);
    s.block_index = block_index;
    s
}

/// Exact evaluation of `sign * 0.5 * (x + s * 2^-l)` in the integer domain:
/// `n_out = sign * (n + s) / 2`, an exact integer because the side bit makes
/// `n + s` even. Equals `quantize(gamma * (decode(x) + s * 2^-l))` for
/// `gamma = sign * 0.5` — the quantization has no effect.
pub fn half_scale_exact(x: &QuantizedState, s: &SideBits, sign: i32) -> Result<QuantizedState> {
    assert!(sign == 1 || sign == -1, "sign must be +1 or -1, got {sign}");
    assert_eq!(s.len, x.data.len(), "side bits length mismatch");
    let mut data = Vec::with_capacity(x.data.len());
    for (m, &n) in x.data.iter().enumerate() {
        let sum = n as i64 + s.get(m) as i64;
        if sum & 1 != 0 {
            return Err(Error::ParityViolation { index: m });
        }
        // |sum / 2| <= |n|/2 + 1 stays inside the range invariant.
        data.push((sign as i64 * (sum >> 1)) as i32);
    }
    Ok(QuantizedState { shape: x.shape.clone(), data, cfg: x.cfg })
}

/// Decode to the working float format: element `m` is `n[m] * 2^-l`,
/// exactly representable thanks to the `l + range_exp <= 24` bound.
pub fn decode<S: Scalar>(x: &QuantizedState) -> Tensor<S> {
    let step = x.cfg.step();
    let data = x.data.iter().map(|&n| S::from_f64(n as f64 * step)).collect();
    Tensor::new(x.shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg9() -> QuantConfig {
        QuantConfig::default()
    }

    fn scalar<S: Scalar>(v: f64) -> Tensor<S> {
        Tensor::new(vec![1], vec![S::from_f64(v)])
    }

    #[test]
    fn config_bounds_are_enforced() {
        assert!(QuantConfig::new(9, 14).is_ok());
        assert!(matches!(QuantConfig::new(0, 14), Err(Error::InvalidQuantConfig { .. })));
        assert!(matches!(QuantConfig::new(9, 0), Err(Error::InvalidQuantConfig { .. })));
        assert!(matches!(QuantConfig::new(16, 14), Err(Error::InvalidQuantConfig { .. })));
    }

    #[test]
    fn quantize_zero_is_zero() {
        let q = quantize(&scalar::<f64>(0.0), cfg9()).unwrap();
        assert_eq!(q.ints(), &[0]);
        assert_eq!(decode::<f64>(&q).data()[0], 0.0);
    }

    #[test]
    fn quantize_rounds_to_nearest_grid_point() {
        // 0.001 * 512 = 0.512 -> 1, value 1/512.
        let q = quantize(&scalar::<f64>(0.001), cfg9()).unwrap();
        assert_eq!(q.ints(), &[1]);
        assert_eq!(decode::<f64>(&q).data()[0], 1.0 / 512.0);
        assert_eq!(decode::<f64>(&q).data()[0], 0.001953125);
    }

    #[test]
    fn quantize_breaks_ties_to_even() {
        // 3/1024 * 512 = 1.5 exactly -> 2, not 1.
        let q = quantize(&scalar::<f64>(3.0 / 1024.0), cfg9()).unwrap();
        assert_eq!(q.ints(), &[2]);
        // Negative tie: -1.5 -> -2.
        let q = quantize(&scalar::<f64>(-3.0 / 1024.0), cfg9()).unwrap();
        assert_eq!(q.ints(), &[-2]);
        // 2.5 -> 2 (even neighbor below).
        let q = quantize(&scalar::<f64>(5.0 / 1024.0), cfg9()).unwrap();
        assert_eq!(q.ints(), &[2]);
    }

    #[test]
    fn quantize_rejects_out_of_range_and_non_finite() {
        assert!(matches!(
            quantize(&scalar::<f64>(16384.0), cfg9()),
            Err(Error::RangeOverflow { .. })
        ));
        assert!(matches!(
            quantize(&scalar::<f64>(f64::NAN), cfg9()),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            quantize(&scalar::<f64>(f64::INFINITY), cfg9()),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn side_bits_take_parity_with_mathematical_modulus() {
        let x = QuantizedState::from_ints(vec![3], vec![0, 3, -2], cfg9()).unwrap();
        let s = side_bits(&x);
        assert_eq!([s.get(0), s.get(1), s.get(2)], [0, 1, 0]);

        let neg = QuantizedState::from_ints(vec![1], vec![-3], cfg9()).unwrap();
        assert_eq!(side_bits(&neg).get(0), 1);

        let even = QuantizedState::from_ints(vec![4], vec![2, -4, 0, 100], cfg9()).unwrap();
        let s = side_bits(&even);
        assert!((0..4).all(|m| s.get(m) == 0));
    }

    #[test]
    fn half_scale_matches_hand_examples() {
        let x = QuantizedState::from_ints(vec![1], vec![3], cfg9()).unwrap();
        let s = side_bits(&x);
        let h = half_scale_exact(&x, &s, 1).unwrap();
        assert_eq!(h.ints(), &[2]);
        assert_eq!(decode::<f64>(&h).data()[0], 2.0 / 512.0);

        let x = QuantizedState::from_ints(vec![1], vec![4], cfg9()).unwrap();
        let s = side_bits(&x);
        let h = half_scale_exact(&x, &s, -1).unwrap();
        assert_eq!(h.ints(), &[-2]);
    }

    #[test]
    fn half_scale_detects_corrupted_side_bits() {
        let x = QuantizedState::from_ints(vec![1], vec![3], cfg9()).unwrap();
        let zero = side_bits(&QuantizedState::zeros(vec![1], cfg9()));
        assert!(matches!(
            half_scale_exact(&x, &zero, 1),
            Err(Error::ParityViolation { index: 0 })
        ));
    }

    #[test]
    fn decode_hand_values() {
        let q = QuantizedState::from_ints(vec![3], vec![1, 0, -512], cfg9()).unwrap();
        let d = decode::<f64>(&q);
        assert_eq!(d.data(), &[0.001953125, 0.0, -1.0]);
    }

    #[test]
    fn side_bits_pack_little_endian_element_major() {
        // Elements 0..10 with parity 1 at 0, 3, 8.
        let ints = vec![1, 2, 4, -3, 6, 8, 10, 12, 9, 2];
        let x = QuantizedState::from_ints(vec![10], ints, cfg9()).unwrap();
        let s = side_bits_for_block(&x, 4);
        assert_eq!(s.byte_len(), 2);
        assert_eq!(s.to_bytes(), &[0b0000_1001, 0b0000_0001]);
        assert_eq!(s.block_index(), 4);

        let back = SideBits::from_bytes(s.to_bytes(), s.len(), s.block_index()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn side_bits_reject_bad_byte_lengths_and_padding() {
        assert!(SideBits::from_bytes(&[0, 0], 10, 0).is_ok());
        assert!(SideBits::from_bytes(&[0], 10, 0).is_err());
        // Bit 10 set in a 10-element bitset: padding must be zero.
        assert!(SideBits::from_bytes(&[0, 0b100], 10, 0).is_err());
    }

    proptest! {
        /// decode then quantize is the identity on every valid state.
        #[test]
        fn quantize_decode_idempotent(ints in proptest::collection::vec(-(1i32 << 23) + 1..(1i32 << 23), 1..64)) {
            let cfg = cfg9();
            let x = QuantizedState::from_ints(vec![ints.len()], ints, cfg).unwrap();
            let back = quantize(&decode::<f64>(&x), cfg).unwrap();
            prop_assert_eq!(&x, &back);
            // Same through f32: the range bound keeps decode exact there too.
            let back32 = quantize(&decode::<f32>(&x), cfg).unwrap();
            prop_assert_eq!(&x, &back32);
        }

        /// The integer halving equals quantize(gamma * (decode + s * 2^-l))
        /// bitwise for gamma = +-0.5: quantization has no effect.
        #[test]
        fn half_scale_identity(ints in proptest::collection::vec(-(1i32 << 23) + 1..(1i32 << 23), 1..64),
                               sign in prop_oneof![Just(1i32), Just(-1i32)]) {
            let cfg = cfg9();
            let x = QuantizedState::from_ints(vec![ints.len()], ints, cfg).unwrap();
            let s = side_bits(&x);
            let fast = half_scale_exact(&x, &s, sign).unwrap();

            let step = cfg.step();
            let gamma = 0.5 * sign as f64;
            let shifted: Vec<f64> = x
                .ints()
                .iter()
                .enumerate()
                .map(|(m, &n)| gamma * (n as f64 * step + s.get(m) as f64 * step))
                .collect();
            let reference = quantize(&Tensor::new(vec![x.len()], shifted), cfg).unwrap();
            prop_assert_eq!(fast, reference);
        }

        /// n + side_bit is even for every element of every state.
        #[test]
        fn parity_completeness(ints in proptest::collection::vec(-(1i32 << 23) + 1..(1i32 << 23), 1..64)) {
            let x = QuantizedState::from_ints(vec![ints.len()], ints, cfg9()).unwrap();
            let s = side_bits(&x);
            for (m, &n) in x.ints().iter().enumerate() {
                prop_assert_eq!((n as i64 + s.get(m) as i64) & 1, 0);
            }
        }

        /// Grid closure: add/sub/double stay exactly on the grid.
        #[test]
        fn grid_closure(a in proptest::collection::vec(-(1i32 << 21)..(1i32 << 21), 1..32),
                        b in proptest::collection::vec(-(1i32 << 21)..(1i32 << 21), 1..32)) {
            let n = a.len().min(b.len());
            let cfg = cfg9();
            let xa = QuantizedState::from_ints(vec![n], a[..n].to_vec(), cfg).unwrap();
            let xb = QuantizedState::from_ints(vec![n], b[..n].to_vec(), cfg).unwrap();
            let sum = xa.add(&xb).unwrap();
            let diff = xa.sub(&xb).unwrap();
            let twice = xa.double().unwrap();
            for m in 0..n {
                prop_assert_eq!(sum.ints()[m] as i64, xa.ints()[m] as i64 + xb.ints()[m] as i64);
                prop_assert_eq!(diff.ints()[m] as i64, xa.ints()[m] as i64 - xb.ints()[m] as i64);
                prop_assert_eq!(twice.ints()[m] as i64, 2 * xa.ints()[m] as i64);
            }
            // And re-quantizing the decoded results is the identity.
            prop_assert_eq!(&quantize(&decode::<f64>(&sum), cfg).unwrap(), &sum);
        }

        /// Round-trip through the packed byte format is exact.
        #[test]
        fn side_bits_roundtrip(ints in proptest::collection::vec(-(1i32 << 23) + 1..(1i32 << 23), 1..100),
                               block in 0usize..16) {
            let x = QuantizedState::from_ints(vec![ints.len()], ints, cfg9()).unwrap();
            let s = side_bits_for_block(&x, block);
            let back = SideBits::from_bytes(s.to_bytes(), s.len(), s.block_index()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
