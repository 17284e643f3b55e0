//! Unbiased squared maximum mean discrepancy with a Gaussian kernel, the
//! median-heuristic bandwidth and a permutation two-sample test.
//!
//! Kernel values are rounded to 62-bit fixed point before summation, so every
//! sum is exact integer arithmetic. That makes the statistic independent of
//! row order, of the (A, B) orientation and of the rayon thread count.

use ndarray::{concatenate, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::StreamKey;

/// Rows used for the median heuristic; larger pools are subsampled.
pub const BANDWIDTH_SUBSAMPLE: usize = 2000;

const FIXED_ONE: f64 = (1u64 << 62) as f64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("sample widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("all pooled rows are identical; bandwidth undefined")]
    Degenerate,
    #[error("need at least 2 rows per sample, got {0} and {1}")]
    TooFewSamples(usize, usize),
    #[error("need at least 19 permutations, got {0}")]
    TooFewPermutations(usize),
    #[error("non-finite input")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmdResult {
    pub statistic: f64,
    pub bandwidth: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub p_value: Option<f64>,
}

#[inline]
fn sq_dist(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    u.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// exp(−‖u − v‖² / (2 h²)).
pub fn gaussian_kernel(u: ArrayView1<f64>, v: ArrayView1<f64>, bandwidth: f64) -> f64 {
    (-sq_dist(u, v) / (2.0 * bandwidth * bandwidth)).exp()
}

#[inline]
fn fixed(k: f64) -> u64 {
    (k * FIXED_ONE).round() as u64
}

fn median(v: &mut [f64]) -> f64 {
    let m = v.len();
    let hi = *v.select_nth_unstable_by(m / 2, f64::total_cmp).1;
    if m % 2 == 1 {
        hi
    } else {
        let lo = v[..m / 2].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Median pairwise Euclidean distance over the pooled rows (a fixed
/// subsample of [`BANDWIDTH_SUBSAMPLE`] rows when larger). If more than half
/// the pairs coincide, the median of the nonzero distances is used.
pub fn median_bandwidth(pooled: ArrayView2<f64>) -> Result<f64, MetricsError> {
    let m = pooled.nrows();
    if m < 2 {
        return Err(MetricsError::TooFewSamples(m, 0));
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let rows: Vec<usize> = if m > BANDWIDTH_SUBSAMPLE {
        let mut perm = StreamKey::new(0).substream("bandwidth", 0).stream().permutation(m);
        perm.truncate(BANDWIDTH_SUBSAMPLE);
        perm.sort_unstable();
        perm
    } else {
        (0..m).collect()
    };
    let mut d: Vec<f64> = (0..rows.len())
        .into_par_iter()
        .flat_map_iter(|a| {
            let ra = pooled.row(rows[a]);
            rows[a + 1..].iter().map(move |&b| sq_dist(ra, pooled.row(b)).sqrt())
        })
        .collect();
    let med = median(&mut d);
    if med > 0.0 {
        return Ok(med);
    }
    let mut pos: Vec<f64> = d.into_iter().filter(|&x| x > 0.0).collect();
    if pos.is_empty() {
        return Err(MetricsError::Degenerate);
    }
    Ok(median(&mut pos))
}

fn check(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<(), MetricsError> {
    if a.ncols() != b.ncols() {
        return Err(MetricsError::WidthMismatch(a.ncols(), b.ncols()));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(MetricsError::TooFewSamples(a.nrows(), b.nrows()));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

/// Integer kernel sums (within A over i ≠ j, within B over i ≠ j, across).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct PairSums {
    aa: u128,
    bb: u128,
    ab: u128,
}

impl PairSums {
    fn add(self, o: PairSums) -> PairSums {
        PairSums { aa: self.aa + o.aa, bb: self.bb + o.bb, ab: self.ab + o.ab }
    }

    fn statistic(&self, n_a: usize, n_b: usize) -> f64 {
        let (na, nb) = (n_a as f64, n_b as f64);
        let aa = self.aa as f64 / FIXED_ONE / (na * (na - 1.0));
        let bb = self.bb as f64 / FIXED_ONE / (nb * (nb - 1.0));
        let ab = self.ab as f64 / FIXED_ONE / (na * nb);
        (aa + bb) - 2.0 * ab
    }
}

/// Unbiased U-statistic estimate of MMD²(A, B) with
/// k(u, v) = exp(−‖u − v‖² / (2 h²)).
pub fn squared_mmd(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: f64) -> Result<MmdResult, MetricsError> {
    check(a, b)?;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(MetricsError::Degenerate);
    }
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |u: ArrayView1<f64>, v: ArrayView1<f64>| fixed((-sq_dist(u, v) * g).exp()) as u128;
    let within = |x: ArrayView2<f64>| -> u128 {
        (0..x.nrows())
            .into_par_iter()
            .map(|i| (i + 1..x.nrows()).map(|j| k(x.row(i), x.row(j))).sum::<u128>())
            .sum::<u128>()
            * 2
    };
    let ab = (0..a.nrows())
        .into_par_iter()
        .map(|i| b.rows().into_iter().map(|bj| k(a.row(i), bj)).sum::<u128>())
        .sum::<u128>();
    let sums = PairSums { aa: within(a), bb: within(b), ab };
    Ok(MmdResult { statistic: sums.statistic(a.nrows(), b.nrows()), bandwidth, n_a: a.nrows(), n_b: b.nrows(), p_value: None })
}

/// Fixed-point Gram matrix of the pooled sample, upper triangle packed row by
/// row (diagonal excluded).
struct PackedGram {
    n: usize,
    vals: Vec<u64>,
    offsets: Vec<usize>,
    /// Sum of each packed row; does not depend on the split.
    totals: Vec<u128>,
}

impl PackedGram {
    fn new(x: ArrayView2<f64>, bandwidth: f64) -> Self {
        let n = x.nrows();
        let g = 1.0 / (2.0 * bandwidth * bandwidth);
        let mut offsets = Vec::with_capacity(n);
        let mut off = 0;
        for i in 0..n {
            offsets.push(off);
            off += n - 1 - i;
        }
        let mut vals = vec![0u64; off];
        let mut slices = Vec::with_capacity(n);
        let mut rest = vals.as_mut_slice();
        for i in 0..n {
            let (head, tail) = rest.split_at_mut(n - 1 - i);
            slices.push(head);
            rest = tail;
        }
        slices.into_par_iter().enumerate().for_each(|(i, row)| {
            let xi = x.row(i);
            for (r, j) in row.iter_mut().zip(i + 1..n) {
                *r = fixed((-sq_dist(xi, x.row(j)) * g).exp());
            }
        });
        let mut gram = Self { n, vals, offsets, totals: Vec::new() };
        let ones = vec![u64::MAX; n];
        gram.totals = (0..n).into_par_iter().map(|i| gram.masked_row_sum(i, &ones)).collect();
        gram
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.vals[self.offsets[i]..self.offsets[i] + self.n - 1 - i]
    }

    /// Σ_j>i K_ij over columns whose mask is all ones. Low and high halves
    /// go to separate u64 accumulators, which cannot overflow for n < 2³²
    /// and keep the loop branch free.
    fn masked_row_sum(&self, i: usize, mask: &[u64]) -> u128 {
        let (mut lo, mut hi) = (0u64, 0u64);
        for (&v, &m) in self.row(i).iter().zip(&mask[i + 1..]) {
            let w = v & m;
            lo += w & 0xFFFF_FFFF;
            hi += w >> 32;
        }
        ((hi as u128) << 32) + lo as u128
    }

    /// Sums for the split where `mask[i]` is all ones for rows of the first
    /// sample and zero otherwise.
    fn sums(&self, mask: &[u64]) -> PairSums {
        (0..self.n)
            .into_par_iter()
            .map(|i| {
                let to_a = self.masked_row_sum(i, mask);
                let to_b = self.totals[i] - to_a;
                if mask[i] != 0 {
                    PairSums { aa: 2 * to_a, bb: 0, ab: to_b }
                } else {
                    PairSums { aa: 0, bb: 2 * to_b, ab: to_a }
                }
            })
            .reduce(PairSums::default, PairSums::add)
    }
}

/// Permutation test of A and B having the same law. The bandwidth is the
/// median heuristic on the original pooled rows and stays fixed across
/// permutations; p = (1 + #{perm stat ≥ observed}) / (1 + n_perm).
pub fn mmd_permutation_p(a: ArrayView2<f64>, b: ArrayView2<f64>, n_perm: usize, key: StreamKey) -> Result<MmdResult, MetricsError> {
    check(a, b)?;
    if n_perm < 19 {
        return Err(MetricsError::TooFewPermutations(n_perm));
    }
    let pooled = concatenate![Axis(0), a, b];
    let h = median_bandwidth(pooled.view())?;
    let gram = PackedGram::new(pooled.view(), h);
    let (n_a, n_b) = (a.nrows(), b.nrows());
    let n = n_a + n_b;
    let side = |in_a: bool| if in_a { u64::MAX } else { 0 };
    let mut mask: Vec<u64> = (0..n).map(|i| side(i < n_a)).collect();
    let observed = gram.sums(&mask).statistic(n_a, n_b);
    let mut exceed = 0usize;
    for m in 0..n_perm {
        let perm = key.substream("perm", m as u64).stream().permutation(n);
        for (slot, &row) in perm.iter().enumerate() {
            mask[row] = side(slot < n_a);
        }
        if gram.sums(&mask).statistic(n_a, n_b) >= observed {
            exceed += 1;
        }
    }
    Ok(MmdResult {
        statistic: observed,
        bandwidth: h,
        n_a,
        n_b,
        p_value: Some((1 + exceed) as f64 / (1 + n_perm) as f64),
    })
}
