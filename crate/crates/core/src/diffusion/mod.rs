//! Variance-preserving forward process, denoising score matching and
//! per-node training of causality-encoded diffusion models.

mod model;
mod risk;

pub use model::{CedmModel, ModelError, TrainConfig, TrainMeta, Weighting};
pub use risk::{dsm_minibatch_loss, estimate_population_risk, RiskEstimate};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scm::{ScmError, ScmSpec};

/// Scores larger than this in magnitude are clipped.
pub const SCORE_CLIP: f64 = 1e4;

/// (α_t, σ_t) = (e^{−t/2}, √(1 − e^{−t})).
#[inline]
pub fn alpha_sigma(t: f64) -> (f64, f64) {
    ((-0.5 * t).exp(), (-(-t).exp_m1()).sqrt())
}

/// x' = α_t x + σ_t ε.
pub fn perturb(x: &[f64], t: f64, eps: &[f64]) -> Vec<f64> {
    let (a, s) = alpha_sigma(t);
    x.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("time {t} outside [0, {t_end}]")]
    Range { t: f64, t_end: f64 },
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSchedule {
    /// Early-stopping time.
    pub t0: f64,
    /// Terminal time T.
    pub t_end: f64,
    /// Reverse-time Euler–Maruyama steps.
    pub n_steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { t0: 1e-3, t_end: 5.0, n_steps: 200 }
    }
}

impl DiffusionSchedule {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self, DiffusionError> {
        let s = Self { t0, t_end, n_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.t0 > 0.0 && self.t0 < self.t_end && self.t_end.is_finite()) {
            return Err(DiffusionError::Schedule(format!("need 0 < t0 < T, got t0={} T={}", self.t0, self.t_end)));
        }
        if self.n_steps == 0 {
            return Err(DiffusionError::Schedule("n_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> Result<(f64, f64), DiffusionError> {
        if !(0.0..=self.t_end).contains(&t) {
            return Err(DiffusionError::Range { t, t_end: self.t_end });
        }
        Ok(alpha_sigma(t))
    }

    /// Reverse-time step size h = (T − t0) / n_steps.
    pub fn step(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }
}

/// Per-column mean and standard deviation of the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Sample mean and (n − 1)-normalised standard deviation; columns with
    /// no spread get std 1.
    pub fn fit(values: ArrayView2<f64>) -> Self {
        let n = values.nrows() as f64;
        let mut mean = Vec::with_capacity(values.ncols());
        let mut std = Vec::with_capacity(values.ncols());
        for c in values.axis_iter(Axis(1)) {
            let m = c.sum() / n;
            let var = if values.nrows() > 1 { c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            let s = var.sqrt();
            mean.push(m);
            std.push(if s > 1e-12 { s } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, values: ArrayView2<f64>) -> Array2<f64> {
        let mut out = values.to_owned();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        out
    }

    pub fn unstandardize(&self, values: ArrayView2<f64>) -> Array2<f64> {
        let mut out = values.to_owned();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[k] + self.mean[k];
            }
        }
        out
    }

    /// Standardises values living in columns `cols`.
    pub fn standardize_cols(&self, values: &[f64], cols: &[usize]) -> Vec<f64> {
        values.iter().zip(cols).map(|(v, &c)| (v - self.mean[c]) / self.std[c]).collect()
    }

    pub fn select(&self, cols: &[usize]) -> NormStats {
        NormStats { mean: cols.iter().map(|&c| self.mean[c]).collect(), std: cols.iter().map(|&c| self.std[c]).collect() }
    }
}

/// Batched conditional score ∇_{x'} log p_t(x'_j | x_pa(j)). Rows of `x` and
/// `pa` are samples; `pa` holds the concatenated parent blocks.
pub trait ConditionalScore: Sync {
    fn score(&self, node: usize, x: ArrayView2<f64>, pa: ArrayView2<f64>, t: f64) -> Array2<f64>;
}

/// Exact scores of a linear-Gaussian SCM.
#[derive(Debug, Clone)]
pub struct AnalyticScores {
    spec: ScmSpec,
}

impl AnalyticScores {
    pub fn new(spec: ScmSpec) -> Result<Self, ScmError> {
        if let Some(j) = (0..spec.dag().num_nodes()).find(|&j| !spec.mechanism(j).is_linear()) {
            return Err(ScmError::NotLinearGaussian(j));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ScmSpec {
        &self.spec
    }
}

impl ConditionalScore for AnalyticScores {
    fn score(&self, node: usize, x: ArrayView2<f64>, pa: ArrayView2<f64>, t: f64) -> Array2<f64> {
        self.spec.analytic_score_batch(node, x, pa, t).expect("linear-Gaussian spec with matching shapes")
    }
}

/// Affine map of another score: `scale · s(x, pa, t) + shift`.
pub struct AffineScore<'a, S: ConditionalScore> {
    pub inner: &'a S,
    pub scale: f64,
    pub shift: f64,
}

impl<S: ConditionalScore> ConditionalScore for AffineScore<'_, S> {
    fn score(&self, node: usize, x: ArrayView2<f64>, pa: ArrayView2<f64>, t: f64) -> Array2<f64> {
        self.inner.score(node, x, pa, t).mapv(|v| self.scale * v + self.shift)
    }
}

/// The zero score.
pub struct ZeroScore;

impl ConditionalScore for ZeroScore {
    fn score(&self, _node: usize, x: ArrayView2<f64>, _pa: ArrayView2<f64>, _t: f64) -> Array2<f64> {
        Array2::zeros(x.dim())
    }
}

/// Network input rows [x', x_pa, t, α_t, σ_t].
pub fn net_input(x: ArrayView2<f64>, pa: ArrayView2<f64>, t: &[f64]) -> Array2<f64> {
    let (n, d, r) = (x.nrows(), x.ncols(), pa.ncols());
    let mut out = Array2::zeros((n, d + r + 3));
    for i in 0..n {
        let mut row = out.row_mut(i);
        for a in 0..d {
            row[a] = x[[i, a]];
        }
        for b in 0..r {
            row[d + b] = pa[[i, b]];
        }
        let (al, si) = alpha_sigma(t[i]);
        row[d + r] = t[i];
        row[d + r + 1] = al;
        row[d + r + 2] = si;
    }
    out
}

pub(crate) fn clip_scores(mut s: Array2<f64>) -> Array2<f64> {
    s.mapv_inplace(|v| if v.is_nan() { v } else { v.clamp(-SCORE_CLIP, SCORE_CLIP) });
    s
}
