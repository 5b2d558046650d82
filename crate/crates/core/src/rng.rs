//! Seeded, splittable random number source.
//!
//! One root seed drives every stochastic choice in the engine. Consumers
//! that need independent streams (parameter init, dropout, shuffling, the
//! synthetic generator) derive children with [`SplitRng::split`], so adding
//! a new consumer never perturbs the draws of existing ones.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct SplitRng {
    inner: ChaCha12Rng,
    root: u64,
}

/// SplitMix64 finalizer; used only to derive child seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        SplitRng { inner: ChaCha12Rng::seed_from_u64(seed), root: seed }
    }

    /// Derives an independent child stream. Deterministic in (root, stream).
    pub fn split(&self, stream: u64) -> SplitRng {
        SplitRng::new(mix(self.root ^ mix(stream)))
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        use num_traits::Float;
        let u1 = (1.0 - self.uniform()).max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * core::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle with draws from this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SplitRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SplitRng::new(7);
        let mut b = SplitRng::new(7);
        for _ in 0..32 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn split_streams_are_independent_of_consumption() {
        let parent = SplitRng::new(42);
        let mut sibling = parent.split(1);
        let mut parent2 = SplitRng::new(42);
        let _ = parent2.uniform(); // consuming the parent must not shift children
        let mut sibling2 = parent2.split(1);
        assert_eq!(sibling.uniform().to_bits(), sibling2.uniform().to_bits());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = SplitRng::new(3);
        let mut v: Vec<usize> = (0..20).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }
}
