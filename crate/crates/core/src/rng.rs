//! Replayable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the root seed with the
//! stream id selecting an independent 64-bit ChaCha stream. Named streams
//! hash a label and an index into the stream id, so the draws seen by one
//! component never depend on how many draws another component made.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

/// FNV-1a over the label bytes. Stable across platforms and toolchains.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stream id for a labelled family member, e.g. `("local-batches", client)`.
pub fn stream_id(label: &str, index: u64) -> u64 {
    mix64(label_hash(label) ^ mix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Stream for a named component under a root seed.
    pub fn named(seed: u64, label: &str, index: u64) -> Self {
        Self::new(seed, stream_id(label, index))
    }

    /// Independent child stream, addressed by label and index.
    pub fn child(&self, label: &str, index: u64) -> Self {
        Self::new(self.seed, mix64(self.stream_id ^ stream_id(label, index)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`; `lo == hi` returns `lo`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!("uniform bounds require lo <= hi, got [{lo}, {hi})")));
        }
        if lo == hi {
            return Ok(lo);
        }
        let v = lo + (hi - lo) * self.next_f64();
        // rounding can land exactly on hi
        Ok(if v >= hi { lo.max(hi.next_down()) } else { v })
    }

    /// Uniform integer in `[0, n)`, unbiased by rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// A random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Gamma(shape, 1) draw.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        let g = Gamma::new(shape, 1.0)
            .map_err(|e| Error::config(format!("gamma shape {shape}: {e}")))?;
        Ok(g.sample(&mut self.inner))
    }
}

/// Free-function form of [`RngStream::uniform`].
pub fn draw_uniform(rng: &mut RngStream, lo: f64, hi: f64) -> Result<f64> {
    rng.uniform(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_interval() {
        let mut rng = RngStream::new(1, 2);
        assert_eq!(draw_uniform(&mut rng, 3.0, 3.0).unwrap(), 3.0);
    }

    #[test]
    fn inverted_interval_is_rejected() {
        let mut rng = RngStream::new(1, 2);
        assert!(matches!(draw_uniform(&mut rng, 2.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_mean_law_of_large_numbers() {
        let mut rng = RngStream::new(20240601, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let v = rng.uniform(0.0, 1.0).unwrap();
            assert!((0.0..1.0).contains(&v));
            sum += v;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.003);
    }

    #[test]
    fn same_seed_and_stream_replay() {
        let mut a = RngStream::new(99, 5);
        let mut b = RngStream::new(99, 5);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::named(99, "data", 0);
        let mut b = RngStream::named(99, "partition", 0);
        let mut c = RngStream::named(99, "data", 1);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn below_stays_in_range_and_covers() {
        let mut rng = RngStream::new(4, 4);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[rng.below(7)] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = RngStream::new(8, 0);
        let mut p = rng.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
