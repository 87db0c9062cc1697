//! Seeded random source. Every random draw in the crate comes through this
//! wrapper so determinism is a property of the call order alone.
//!
//! The generator is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), keyed
//! from the user seed. A fixed seed yields the identical draw sequence on
//! every platform. `fork` switches to an independent ChaCha stream under the
//! same key; unrelated phases of a run (corpus synthesis, training batches,
//! sampling) each take their own stream off the root generator so adding
//! draws to one phase cannot shift another. Streams depend only on the
//! original seed, so fork a given stream index once: forking a fork aliases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream under the same key. Forking with the same
    /// index always yields the same generator, regardless of draws made on
    /// `self` so far.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        // Stream 0 is the root generator itself; offset to keep forks disjoint.
        inner.set_stream(stream.wrapping_add(1));
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    /// One standard normal draw (ziggurat method from `rand_distr`).
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// True with probability p.
    pub fn below(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    /// Fisher-Yates shuffle in place.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SeededRng::new(99);
        let mut b = SeededRng::new(99);
        let xs: Vec<f64> = (0..32).map(|_| a.normal()).collect();
        let ys: Vec<f64> = (0..32).map(|_| b.normal()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn forks_are_independent_of_parent_state() {
        let mut a = SeededRng::new(5);
        let before = a.fork(3).normal();
        for _ in 0..100 {
            a.normal();
        }
        let after = a.fork(3).normal();
        assert_eq!(before, after);
        // And different streams differ from each other and the root.
        assert_ne!(a.fork(1).normal(), a.fork(2).normal());
        assert_ne!(SeededRng::new(5).normal(), a.fork(0).normal());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = SeededRng::new(1);
        let mut xs: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(xs, (0..50).collect::<Vec<_>>());
    }
}
