//! Counter-based deterministic RNG.
//!
//! Output `i` is a pure function of `(seed, i)` (splitmix64 finalizer over a
//! Weyl sequence), so the stream can be re-queried or split without shared
//! state. Normal deviates use an inverse-CDF evaluation instead of
//! Box-Muller: one uniform per sample keeps the counter accounting trivial,
//! and the arithmetic is plain add/mul/div plus `libm`, so the stream is
//! reproducible across platforms.

const WEYL: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash an id list into a single word; used for stateless per-key draws.
pub fn hash_words(words: &[u64]) -> u64 {
    let mut acc = 0x243F_6A88_85A3_08D3u64; // arbitrary nonzero start
    for &w in words {
        acc = mix64(acc ^ w.wrapping_mul(WEYL));
    }
    acc
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Derive an independent stream; the parent is not advanced.
    pub fn split(&self, stream: u64) -> Rng {
        Rng { seed: mix64(self.seed ^ mix64(stream ^ 0x5851_F42D_4C95_7F2D)), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(WEYL)))
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        // 128-bit multiply avoids modulo bias well past any desk-scale bound.
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Standard normal deviate.
    pub fn normal(&mut self) -> f64 {
        inverse_normal_cdf(self.uniform())
    }

    /// Normal truncated to `[-2, 2]` standard deviations, then scaled.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        const PHI_LO: f64 = 0.022750131948179212; // Phi(-2)
        const PHI_HI: f64 = 0.977249868051820788; // Phi(+2)
        let u = PHI_LO + self.uniform() * (PHI_HI - PHI_LO);
        inverse_normal_cdf(u) * std
    }
}

/// Acklam's rational approximation of the standard normal quantile
/// (|relative error| < 1.15e-9 over (0, 1)).
fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    debug_assert!(p > 0.0 && p < 1.0);
    if p < P_LOW {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = libm::sqrt(-2.0 * libm::log(1.0 - p));
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_streams_differ_and_leave_parent_alone() {
        let parent = Rng::new(7);
        let mut s0 = parent.split(0);
        let mut s1 = parent.split(1);
        assert_ne!(s0.next_u64(), s1.next_u64());
        let mut p2 = parent.clone();
        assert_eq!(Rng::new(7).next_u64(), p2.next_u64());
    }

    #[test]
    fn truncated_normal_stays_inside_two_sigma() {
        let mut rng = Rng::new(3);
        for _ in 0..10_000 {
            let z = rng.truncated_normal(0.02);
            assert!(z.abs() <= 0.04 + 1e-12, "z = {z}");
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = Rng::new(11);
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean = {mean}");
        assert!((var - 1.0).abs() < 0.03, "var = {var}");
    }

    #[test]
    fn inverse_cdf_matches_erf_roundtrip() {
        // Phi(inverse_normal_cdf(p)) == p to the approximation's accuracy.
        for &p in &[0.001, 0.01, 0.0228, 0.3, 0.5, 0.77, 0.99, 0.9995] {
            let z = inverse_normal_cdf(p);
            let phi = 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
            assert!((phi - p).abs() < 1e-8, "p = {p}, roundtrip = {phi}");
        }
    }

    #[test]
    fn below_is_unbiased_enough_and_in_range() {
        let mut rng = Rng::new(5);
        let mut counts = [0u32; 7];
        for _ in 0..70_000 {
            counts[rng.below(7) as usize] += 1;
        }
        for &c in &counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0, "counts = {counts:?}");
        }
    }
}
