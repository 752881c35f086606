//! Counter-based splittable random streams.
//!
//! Every [`Rng`] is a ChaCha8 keystream addressed by `(seed, stream)`. Child
//! streams are derived from the parent's address alone, never from how many
//! values the parent has produced, so per-image streams can be handed out in
//! any order (or in parallel) without changing what each image sees.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream number `key`. Independent of the parent's position.
    pub fn fork(&self, key: u64) -> Rng {
        let child = mix64(self.stream ^ mix64(key.wrapping_add(0x5bd1_e995)));
        Rng::with_stream(self.seed, child)
    }

    /// `k` child streams, `fork(0..k)`.
    pub fn split(&self, k: usize) -> Vec<Rng> {
        (0..k as u64).map(|i| self.fork(i)).collect()
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_f32(&mut self) -> f32 {
        (self.inner.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[lo, hi)`; returns `lo` when `lo == hi`.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        debug_assert!(lo <= hi);
        let u = self.next_f32();
        if lo == hi {
            return lo;
        }
        let v = lo + (hi - lo) * u;
        if v >= hi {
            hi.next_down()
        } else {
            v
        }
    }

    pub fn bernoulli(&mut self, p: f32) -> bool {
        self.next_f32() < p
    }

    /// Standard normal sample.
    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    /// `k` distinct indices from `0..population`, every subset equally likely.
    /// Returned in draw order.
    pub fn sample_without_replacement(&mut self, population: usize, k: usize) -> Result<Vec<usize>> {
        if k > population {
            return Err(Error::invalid(format!("cannot sample {k} items from a population of {population}")));
        }
        Ok(rand::seq::index::sample(&mut self.inner, population, k).into_vec())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        rand::seq::SliceRandom::shuffle(items, &mut self.inner);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_same_sequence() {
        let mut a = Rng::with_stream(7, 3);
        let mut b = Rng::with_stream(7, 3);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn fork_ignores_parent_position() {
        let a = Rng::new(11);
        let mut b = Rng::new(11);
        for _ in 0..10 {
            b.next_u64();
        }
        assert_eq!(a.fork(5).next_u64(), b.fork(5).next_u64());
    }

    #[test]
    fn split_streams_have_no_shared_prefix() {
        let streams = Rng::new(1).split(16);
        let prefixes: Vec<Vec<u64>> = streams.into_iter().map(|mut r| (0..4).map(|_| r.next_u64()).collect()).collect();
        for i in 0..prefixes.len() {
            for j in i + 1..prefixes.len() {
                assert!(prefixes[i].iter().all(|v| !prefixes[j].contains(v)));
            }
        }
    }

    #[test]
    fn degenerate_interval() {
        let mut r = Rng::new(0);
        assert_eq!(r.uniform(0.05, 0.05), 0.05);
    }

    #[test]
    fn uniform_stays_in_half_open_range() {
        let mut r = Rng::new(2);
        for _ in 0..10_000 {
            let v = r.uniform(0.4, 0.7);
            assert!((0.4..0.7).contains(&v));
        }
    }

    #[test]
    fn full_population_sample() {
        let mut r = Rng::new(3);
        let mut s = r.sample_without_replacement(5, 5).unwrap();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
        assert!(r.sample_without_replacement(3, 4).is_err());
        assert!(r.sample_without_replacement(0, 0).unwrap().is_empty());
    }

    #[test]
    fn sample_frequencies_are_uniform() {
        let mut r = Rng::new(4);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws {
            let s = r.sample_without_replacement(10, 3).unwrap();
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 3);
            for i in s {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.3).abs() < 0.01, "frequency {f}");
        }
    }
}
