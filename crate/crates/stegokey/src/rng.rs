//! Deterministic counter-based pseudo-random streams.
//!
//! Every random quantity in this crate (mask sampling, key-seeded weight
//! fills, Gaussian noise, batch shuffles, synthetic data) is drawn from a
//! [`SeedStream`], a stateless counter-based generator built on the
//! SplitMix64 output function:
//!
//! ```text
//! value(seed, c) = mix64(seed + (c + 1) * 0x9e3779b97f4a7c15)
//! mix64(z): z ^= z >> 30; z *= 0xbf58476d1ce4e5b9;
//!           z ^= z >> 27; z *= 0x94d049bb133111eb;
//!           z ^= z >> 31
//! ```
//!
//! The `counter`-th value depends only on `(seed, counter)`, never on call
//! order, so streams can be evaluated lazily, in parallel, or re-evaluated
//! after a restart and always produce the same bits on every platform.

/// Weyl increment used to space counters along the stream.
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer. Bijective on u64.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A stateless random stream identified by a 64-bit seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed }
    }

    /// Derive an independent stream. Distinct `label` values give streams
    /// that are decorrelated from each other and from the parent.
    pub fn substream(&self, label: u64) -> SeedStream {
        SeedStream {
            seed: mix64(self.seed ^ mix64(label.wrapping_add(GOLDEN_GAMMA))),
        }
    }

    /// The `counter`-th raw 64-bit value of the stream.
    #[inline]
    pub fn value(&self, counter: u64) -> u64 {
        mix64(
            self.seed
                .wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    /// Uniform f64 in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn unit_f64(&self, counter: u64) -> f64 {
        (self.value(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in `(0, 1]`; never returns zero (safe under `ln`).
    #[inline]
    fn unit_f64_open(&self, counter: u64) -> f64 {
        ((self.value(counter) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in `[-bound, bound)`.
    #[inline]
    pub fn symmetric_f64(&self, counter: u64, bound: f64) -> f64 {
        (2.0 * self.unit_f64(counter) - 1.0) * bound
    }

    /// Standard normal deviate via Box-Muller on counters `2c` and `2c+1`.
    #[inline]
    pub fn gaussian(&self, counter: u64) -> f64 {
        let u1 = self.unit_f64_open(2 * counter);
        let u2 = self.unit_f64(2 * counter + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`. Plain modulo: the bias for n far below
    /// 2^64 is negligible and the result is identical on every platform.
    #[inline]
    pub fn bounded(&self, counter: u64, n: u64) -> u64 {
        self.value(counter) % n
    }

    /// Deterministic Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.bounded((items.len() - 1 - i) as u64, (i + 1) as u64) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_order_independent() {
        let s = SeedStream::new(42);
        let forward: Vec<u64> = (0..8).map(|c| s.value(c)).collect();
        let backward: Vec<u64> = (0..8).rev().map(|c| s.value(c)).collect();
        assert_eq!(forward, backward.into_iter().rev().collect::<Vec<_>>());
    }

    #[test]
    fn substreams_differ() {
        let s = SeedStream::new(7);
        assert_ne!(s.substream(0).value(0), s.substream(1).value(0));
        assert_ne!(s.substream(0).value(0), s.value(0));
    }

    #[test]
    fn unit_f64_in_range() {
        let s = SeedStream::new(123);
        for c in 0..10_000 {
            let u = s.unit_f64(c);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let s = SeedStream::new(99);
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for c in 0..n {
            let g = s.gaussian(c);
            sum += g;
            sq += g * g;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let s = SeedStream::new(5);
        let mut v: Vec<u32> = (0..100).collect();
        s.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, (0..100).collect::<Vec<_>>());
    }
}
