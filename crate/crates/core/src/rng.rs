//! Seeded random streams.
//!
//! Every random draw in the lab comes from a [`Stream`], which is a ChaCha8
//! keystream addressed by `(seed, namespace, index)`:
//!
//! * the 64-bit key seed is `splitmix64(seed ^ fnv1a64(namespace))`, expanded
//!   to the 256-bit ChaCha key by `SeedableRng::seed_from_u64`;
//! * the ChaCha stream id is `index`.
//!
//! Uniform reals take the top 53 bits of one `u64` word, and normals use the
//! polar-free Box–Muller transform on two uniforms, so a port that reproduces
//! ChaCha8 reproduces every trace bit for bit.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic random stream derived from a top-level seed.
#[derive(Clone, Debug)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, namespace: &str, index: u64) -> Self {
        let key = splitmix64(seed ^ fnv1a64(namespace.as_bytes()));
        let mut inner = ChaCha8Rng::seed_from_u64(key);
        inner.set_stream(index);
        Self { inner }
    }

    /// Key seed for a child namespace; used to nest derivations.
    pub fn child_seed(seed: u64, namespace: &str, index: u64) -> u64 {
        splitmix64(splitmix64(seed ^ fnv1a64(namespace.as_bytes())) ^ splitmix64(index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift with rejection.
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box–Muller (one of the pair is discarded).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Draws an index from unnormalized nonnegative weights by inversion.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let target = self.uniform() * total;
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                last_positive = i;
                if target < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_same_stream() {
        let mut a = Stream::new(7, "policy.sample", 3);
        let mut b = Stream::new(7, "policy.sample", 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_index_or_namespace_differ() {
        let x = Stream::new(7, "a", 0).next_u64();
        assert_ne!(x, Stream::new(7, "a", 1).next_u64());
        assert_ne!(x, Stream::new(7, "b", 0).next_u64());
        assert_ne!(x, Stream::new(8, "a", 0).next_u64());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = Stream::new(1, "u", 0);
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn below_covers_range() {
        let mut s = Stream::new(1, "b", 0);
        let mut seen = [false; 5];
        for _ in 0..1000 {
            seen[s.below(5) as usize] = true;
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn categorical_skips_zero_weight() {
        let mut s = Stream::new(2, "c", 0);
        for _ in 0..1000 {
            assert_ne!(s.categorical(&[0.3, 0.0, 0.7]), 1);
        }
    }
}
