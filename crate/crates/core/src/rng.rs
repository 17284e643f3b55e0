//! Counter-based random substreams.
//!
//! A [`StreamKey`] is a value derived from a master seed and an ordered path of
//! `(tag, index)` pairs. Each key expands into a ChaCha8 keystream, so every
//! stochastic operation in the crate can address its randomness by position
//! (`[train, node 3, step 1024]`) instead of by consumption order. Two
//! computations that walk the same path see the same numbers no matter how the
//! surrounding work is scheduled across threads.
//!
//! Standard normals use the Box–Muller transform on pairs of
//! 53-bit uniforms; the second value of each pair is cached and returned by
//! the next call. The convention is part of the reproducibility contract.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const LANE_SALT: [u64; 4] = [
    0x243F_6A88_85A3_08D3,
    0x1319_8A2E_0370_7344,
    0xA409_3822_299F_31D0,
    0x082E_FA98_EC4E_6C89,
];

/// Stafford's "mix13" finaliser.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes; stable across platforms and releases.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Position of a random stream: master seed plus the digest of its path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    seed: u64,
    state: [u64; 4],
}

impl StreamKey {
    /// Root key for a master seed (empty path).
    pub fn new(seed: u64) -> Self {
        let mut state = [0u64; 4];
        for (lane, s) in state.iter_mut().enumerate() {
            *s = mix64(seed ^ LANE_SALT[lane]).wrapping_add(GOLDEN.wrapping_mul(lane as u64 + 1));
        }
        Self { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives the child key at `(tag, index)`.
    pub fn substream(&self, tag: &str, index: u64) -> Self {
        let t = mix64(tag_hash(tag) ^ LANE_SALT[0]);
        let i = mix64(index.wrapping_mul(GOLDEN) ^ LANE_SALT[1]);
        let mut state = self.state;
        let mut carry = t ^ i.rotate_left(17);
        for lane in 0..4 {
            let v = mix64(state[lane] ^ carry ^ LANE_SALT[lane].rotate_left(lane as u32 * 7));
            state[lane] = v;
            carry = carry.wrapping_add(v).rotate_left(23) ^ i;
        }
        // Second pass so every lane depends on every other lane.
        for lane in 0..4 {
            state[lane] ^= mix64(state[(lane + 1) % 4].wrapping_add(state[(lane + 3) % 4]));
        }
        Self { seed: self.seed, state }
    }

    /// A 64-bit seed for APIs that take plain seeds, drawn from this key.
    pub fn derive_seed(&self) -> u64 {
        self.stream().inner.next_u64()
    }

    /// Opens the stream at this key.
    pub fn stream(&self) -> Stream {
        let mut bytes = [0u8; 32];
        for (lane, chunk) in bytes.chunks_exact_mut(8).enumerate() {
            chunk.copy_from_slice(&self.state[lane].to_le_bytes());
        }
        Stream {
            inner: ChaCha8Rng::from_seed(bytes),
            spare: None,
        }
    }
}

/// A reproducible random stream. Cheap to create; not meant to be shared.
#[derive(Debug, Clone)]
pub struct Stream {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Stream {
    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    fn uniform_open0(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.standard_normal();
        }
    }

    /// `n` i.i.d. standard normals.
    pub fn gaussian(&mut self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }

    /// `rows × cols` matrix of i.i.d. standard normals, filled row-major.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_vec((rows, cols), self.gaussian(rows * cols))
            .expect("shape matches length")
    }

    /// Uniform integer in `0..n` by rejection (unbiased). Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n) - 1;
        loop {
            let v = self.inner.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// A uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_path_same_stream() {
        let k = StreamKey::new(7).substream("train", 3).substream("step", 1024);
        let k2 = StreamKey::new(7).substream("train", 3).substream("step", 1024);
        assert_eq!(k, k2);
        let a: Vec<u64> = (0..8).map({
            let mut s = k.stream();
            move |_| s.next_u64()
        }).collect();
        let mut s2 = k2.stream();
        let b: Vec<u64> = (0..8).map(|_| s2.next_u64()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn path_order_matters() {
        let root = StreamKey::new(1);
        let ab = root.substream("a", 1).substream("b", 2);
        let ba = root.substream("b", 2).substream("a", 1);
        assert_ne!(ab, ba);
        assert_ne!(root.substream("a", 1), root.substream("a", 2));
        assert_ne!(root.substream("a", 1), root.substream("b", 1));
    }

    #[test]
    fn distinct_master_seeds_no_first_draw_collisions() {
        let mut firsts: Vec<u64> = (0..1000u64)
            .map(|s| StreamKey::new(s).stream().next_u64())
            .collect();
        firsts.sort_unstable();
        firsts.dedup();
        assert_eq!(firsts.len(), 1000);
    }

    #[test]
    fn sibling_streams_look_independent() {
        // Pool first 1000 draws of two siblings into a 10×10 contingency table
        // of decile pairs and run a chi-square test of independence/uniformity.
        let root = StreamKey::new(42);
        let mut a = root.substream("row", 0).stream();
        let mut b = root.substream("row", 1).stream();
        let mut counts = [[0usize; 10]; 10];
        for _ in 0..1000 {
            let i = (a.uniform() * 10.0) as usize;
            let j = (b.uniform() * 10.0) as usize;
            counts[i][j] += 1;
        }
        let expected = 10.0;
        let chi2: f64 = counts
            .iter()
            .flatten()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9% quantile of chi-square with 99 degrees of freedom is ~148.2.
        assert!(chi2 < 148.2, "chi2 = {chi2}");
    }

    #[test]
    fn gaussian_moments() {
        let mut s = StreamKey::new(2024).stream();
        let n = 1_000_000;
        let v = s.gaussian(n);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn below_and_permutation() {
        let mut s = StreamKey::new(3).stream();
        for _ in 0..1000 {
            assert!(s.below(7) < 7);
        }
        let mut p = s.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
