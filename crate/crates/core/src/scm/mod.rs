//! Structural causal models used to generate benchmark data and to provide
//! exact conditional scores for linear-Gaussian graphs.

mod benchmarks;
mod data;

pub use benchmarks::{
    build_benchmark, default_intervention, sachs_network, sachs_super_dag, Benchmark, BenchmarkParams,
    Nonlinearity, SACHS_PROTEINS,
};
pub use data::{Dataset, DatasetMeta, Intervention, Provenance};

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::Dag;
use crate::diffusion::alpha_sigma;
use crate::rng::StreamKey;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScmError {
    #[error("unknown benchmark {0:?}")]
    UnknownBenchmark(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("node {0} is not linear-Gaussian")]
    NotLinearGaussian(usize),
    #[error("noise covariance of node {0} is not symmetric positive definite")]
    NotPositiveDefinite(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Dag(#[from] crate::dag::DagError),
}

/// Elementwise nonlinearity of an additive-noise mechanism term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// scale · tanh(u)
    TanhLinear,
    /// scale · sin(u) + u/2
    SineLinear,
    /// scale · u / (1 + |u|)
    QuadraticSaturating,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::TanhLinear, Family::SineLinear, Family::QuadraticSaturating];

    #[inline]
    pub fn apply(self, u: f64, scale: f64) -> f64 {
        match self {
            Family::TanhLinear => scale * u.tanh(),
            Family::SineLinear => scale * u.sin() + 0.5 * u,
            Family::QuadraticSaturating => scale * u / (1.0 + u.abs()),
        }
    }
}

/// One summand `scale · φ(W x_pa)` of a nonlinear mechanism; `W` is d_j × r_j
/// over the full concatenated parent vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearTerm {
    pub family: Family,
    pub weights: Array2<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mechanism {
    /// Root node: mean; covariance is the node's noise covariance.
    Root { mean: Array1<f64> },
    LinearGaussian { weights: Array2<f64>, bias: Array1<f64> },
    NonlinearAdditive { terms: Vec<NonlinearTerm>, bias: Array1<f64> },
}

impl Mechanism {
    /// Noise-free part g_j(x_pa) written into `out`.
    pub fn mean_into(&self, x_pa: ArrayView1<f64>, out: &mut [f64]) {
        match self {
            Mechanism::Root { mean } => out.copy_from_slice(mean.as_slice().expect("contiguous")),
            Mechanism::LinearGaussian { weights, bias } => {
                for (o, (w, b)) in out.iter_mut().zip(weights.rows().into_iter().zip(bias)) {
                    *o = b + w.dot(&x_pa);
                }
            }
            Mechanism::NonlinearAdditive { terms, bias } => {
                out.copy_from_slice(bias.as_slice().expect("contiguous"));
                for term in terms {
                    for (o, w) in out.iter_mut().zip(term.weights.rows()) {
                        *o += term.family.apply(w.dot(&x_pa), term.scale);
                    }
                }
            }
        }
    }

    fn shape_ok(&self, d: usize, r: usize) -> bool {
        match self {
            Mechanism::Root { mean } => r == 0 && mean.len() == d,
            Mechanism::LinearGaussian { weights, bias } => weights.dim() == (d, r) && bias.len() == d,
            Mechanism::NonlinearAdditive { terms, bias } => {
                bias.len() == d && terms.iter().all(|t| t.weights.dim() == (d, r))
            }
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Mechanism::Root { .. } | Mechanism::LinearGaussian { .. })
    }
}

/// A DAG with per-node mechanisms and additive Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScmRecord", into = "ScmRecord")]
pub struct ScmSpec {
    dag: Dag,
    mechanisms: Vec<Mechanism>,
    noise_covs: Vec<Array2<f64>>,
    noise_chol: Vec<Array2<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ScmRecord {
    dag: Dag,
    mechanisms: Vec<Mechanism>,
    noise_covs: Vec<Array2<f64>>,
}

impl TryFrom<ScmRecord> for ScmSpec {
    type Error = ScmError;

    fn try_from(r: ScmRecord) -> Result<Self, ScmError> {
        ScmSpec::new(r.dag, r.mechanisms, r.noise_covs)
    }
}

impl From<ScmSpec> for ScmRecord {
    fn from(s: ScmSpec) -> Self {
        ScmRecord { dag: s.dag, mechanisms: s.mechanisms, noise_covs: s.noise_covs }
    }
}

fn cholesky(cov: &Array2<f64>) -> Option<Array2<f64>> {
    let d = cov.nrows();
    if cov.ncols() != d {
        return None;
    }
    for i in 0..d {
        for j in 0..i {
            if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-12 * (1.0 + cov[[i, j]].abs()) {
                return None;
            }
        }
    }
    let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let l = m.cholesky()?.l();
    Some(Array2::from_shape_fn((d, d), |(i, j)| l[(i, j)]))
}

/// Inverse of a symmetric positive-definite matrix.
pub(crate) fn spd_inverse(a: &Array2<f64>) -> Option<Array2<f64>> {
    let d = a.nrows();
    let m = DMatrix::from_fn(d, d, |i, j| a[[i, j]]);
    let inv = m.cholesky()?.inverse();
    Some(Array2::from_shape_fn((d, d), |(i, j)| inv[(i, j)]))
}

/// Toeplitz correlation matrix Σ_ij = ρ^{|i−j|}.
pub fn toeplitz_cov(d: usize, rho: f64) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(i, j)| rho.powi((i as i32 - j as i32).abs()))
}

impl ScmSpec {
    pub fn new(dag: Dag, mechanisms: Vec<Mechanism>, noise_covs: Vec<Array2<f64>>) -> Result<Self, ScmError> {
        let p = dag.num_nodes();
        if mechanisms.len() != p || noise_covs.len() != p {
            return Err(ScmError::Dimension(format!(
                "{p} nodes but {} mechanisms and {} noise covariances",
                mechanisms.len(),
                noise_covs.len()
            )));
        }
        let mut noise_chol = Vec::with_capacity(p);
        for j in 0..p {
            let (d, r) = (dag.dim(j), dag.parent_dim(j));
            if !mechanisms[j].shape_ok(d, r) {
                return Err(ScmError::Dimension(format!(
                    "mechanism of {} must map {r} inputs to {d} outputs",
                    dag.label(j)
                )));
            }
            if matches!(mechanisms[j], Mechanism::Root { .. }) != dag.is_root(j) {
                return Err(ScmError::Dimension(format!(
                    "node {}: root mechanisms are exactly for parentless nodes",
                    dag.label(j)
                )));
            }
            if noise_covs[j].dim() != (d, d) {
                return Err(ScmError::Dimension(format!("noise covariance of {} must be {d}×{d}", dag.label(j))));
            }
            noise_chol.push(cholesky(&noise_covs[j]).ok_or(ScmError::NotPositiveDefinite(j))?);
        }
        Ok(Self { dag, mechanisms, noise_covs, noise_chol })
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn mechanism(&self, node: usize) -> &Mechanism {
        &self.mechanisms[node]
    }

    pub fn noise_cov(&self, node: usize) -> &Array2<f64> {
        &self.noise_covs[node]
    }

    pub fn is_linear_gaussian(&self) -> bool {
        self.mechanisms.iter().all(Mechanism::is_linear)
    }

    /// Draws one row into `row` (full width). Intervened nodes take their
    /// values; noise is drawn for every node so rows stay coupled across
    /// interventions.
    fn sample_row(&self, key: StreamKey, intervention: &Intervention, row: &mut [f64], scratch: &mut Vec<f64>) {
        let mut stream = key.stream();
        let layout = self.dag.layout();
        for &j in self.dag.topo_order() {
            let d = self.dag.dim(j);
            let z = stream.gaussian(d);
            let cols = layout.columns(j);
            if let Some(v) = intervention.value_of(j) {
                row[cols].copy_from_slice(v);
                continue;
            }
            scratch.clear();
            for c in self.dag.parent_columns(j) {
                scratch.push(row[c]);
            }
            let x_pa = ArrayView1::from(scratch.as_slice());
            let mut mean = vec![0.0; d];
            self.mechanisms[j].mean_into(x_pa, &mut mean);
            let l = &self.noise_chol[j];
            for a in 0..d {
                let mut e = 0.0;
                for b in 0..=a {
                    e += l[[a, b]] * z[b];
                }
                row[cols.start + a] = mean[a] + e;
            }
        }
    }

    fn sample_rows(&self, n: usize, key: StreamKey, intervention: &Intervention) -> Array2<f64> {
        const CHUNK: usize = 256;
        let width = self.dag.total_dim();
        let mut values = Array2::<f64>::zeros((n, width));
        values
            .as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(CHUNK * width)
            .enumerate()
            .for_each(|(c, chunk)| {
                let mut scratch = Vec::new();
                for (r, row) in chunk.chunks_mut(width).enumerate() {
                    let i = (c * CHUNK + r) as u64;
                    self.sample_row(key.substream("row", i), intervention, row, &mut scratch);
                }
            });
        values
    }

    /// n i.i.d. observational rows generated in topological order.
    pub fn sample_observational(&self, n: usize, seed: u64) -> Result<Dataset, ScmError> {
        self.sample_observational_keyed(n, StreamKey::new(seed).substream("scm", 0))
            .map(|mut d| {
                d.meta.seed = Some(seed);
                d
            })
    }

    pub fn sample_observational_keyed(&self, n: usize, key: StreamKey) -> Result<Dataset, ScmError> {
        if n == 0 {
            return Err(ScmError::Dimension("n must be at least 1".into()));
        }
        let values = self.sample_rows(n, key, &Intervention::empty());
        Dataset::new(
            values,
            self.dag.layout().clone(),
            DatasetMeta { seed: Some(key.seed()), provenance: Provenance::Observational },
        )
    }

    /// Draws from the truncated factorisation: intervened blocks are constant,
    /// the others follow their unmodified mechanisms fed realised parents.
    pub fn sample_interventional(&self, intervention: &Intervention, n: usize, seed: u64) -> Result<Dataset, ScmError> {
        self.sample_interventional_keyed(intervention, n, StreamKey::new(seed).substream("scm", 0))
    }

    pub fn sample_interventional_keyed(
        &self,
        intervention: &Intervention,
        n: usize,
        key: StreamKey,
    ) -> Result<Dataset, ScmError> {
        if n == 0 {
            return Err(ScmError::Dimension("n must be at least 1".into()));
        }
        let checked = Intervention::new(&self.dag, intervention.targets().to_vec(), intervention.values().to_vec())?;
        let values = self.sample_rows(n, key, &checked);
        Dataset::new(
            values,
            self.dag.layout().clone(),
            DatasetMeta { seed: Some(key.seed()), provenance: Provenance::interventional(&self.dag, &checked) },
        )
    }

    /// Draws X_j given per-row parent values (rows of `parents`, width r_j)
    /// from the true mechanism. Row i uses substream `("row", i)` of `key`.
    pub fn sample_node_given_parents(&self, node: usize, parents: ArrayView2<f64>, key: StreamKey) -> Array2<f64> {
        let d = self.dag.dim(node);
        let mut out = Array2::zeros((parents.nrows(), d));
        let l = &self.noise_chol[node];
        for (i, (pa, mut o)) in parents.rows().into_iter().zip(out.rows_mut()).enumerate() {
            let mut s = key.substream("row", i as u64).stream();
            let z = s.gaussian(d);
            let mut mean = vec![0.0; d];
            self.mechanisms[node].mean_into(pa, &mut mean);
            for a in 0..d {
                o[a] = mean[a] + (0..=a).map(|b| l[[a, b]] * z[b]).sum::<f64>();
            }
        }
        out
    }

    /// Exact conditional score ∇_{x'} log p_t(x'_j | x_pa) of a
    /// linear-Gaussian node under the variance-preserving forward process:
    /// −(α_t² Σ_j + σ_t² I)⁻¹ (x'_j − α_t (B_j x_pa + b_j)).
    pub fn analytic_conditional_score(
        &self,
        node: usize,
        x_noisy: &[f64],
        x_pa: &[f64],
        t: f64,
    ) -> Result<Vec<f64>, ScmError> {
        let x = ArrayView2::from_shape((1, x_noisy.len()), x_noisy)
            .map_err(|e| ScmError::Dimension(e.to_string()))?;
        let pa = ArrayView2::from_shape((1, x_pa.len()), x_pa).map_err(|e| ScmError::Dimension(e.to_string()))?;
        Ok(self.analytic_score_batch(node, x, pa, t)?.into_raw_vec_and_offset().0)
    }

    /// Batched [`ScmSpec::analytic_conditional_score`]; rows are samples.
    pub fn analytic_score_batch(
        &self,
        node: usize,
        x_noisy: ArrayView2<f64>,
        x_pa: ArrayView2<f64>,
        t: f64,
    ) -> Result<Array2<f64>, ScmError> {
        if !self.mechanisms[node].is_linear() {
            return Err(ScmError::NotLinearGaussian(node));
        }
        let d = self.dag.dim(node);
        let r = self.dag.parent_dim(node);
        if x_noisy.ncols() != d || x_pa.ncols() != r || x_noisy.nrows() != x_pa.nrows() {
            return Err(ScmError::Dimension(format!(
                "score of {} needs x' width {d} and parent width {r}",
                self.dag.label(node)
            )));
        }
        let (alpha, sigma) = alpha_sigma(t);
        let mut cov = self.noise_covs[node].mapv(|v| alpha * alpha * v);
        for a in 0..d {
            cov[[a, a]] += sigma * sigma;
        }
        let prec = spd_inverse(&cov).ok_or(ScmError::NotPositiveDefinite(node))?;
        let mut out = Array2::zeros((x_noisy.nrows(), d));
        let mut mean = vec![0.0; d];
        let mut resid = vec![0.0; d];
        for ((x, pa), mut o) in x_noisy.rows().into_iter().zip(x_pa.rows()).zip(out.rows_mut()) {
            self.mechanisms[node].mean_into(pa, &mut mean);
            for a in 0..d {
                resid[a] = x[a] - alpha * mean[a];
            }
            for a in 0..d {
                o[a] = -(0..d).map(|b| prec[[a, b]] * resid[b]).sum::<f64>();
            }
        }
        Ok(out)
    }

    /// The same linear-Gaussian SCM expressed in per-coordinate standardised
    /// units z = (x − mean) / std.
    pub fn standardized(&self, mean: &[f64], std: &[f64]) -> Result<ScmSpec, ScmError> {
        let layout = self.dag.layout();
        if mean.len() != layout.width() || std.len() != layout.width() {
            return Err(ScmError::Dimension("standardisation vectors must match data width".into()));
        }
        let mut mechs = Vec::with_capacity(self.mechanisms.len());
        let mut covs = Vec::with_capacity(self.mechanisms.len());
        for j in 0..self.dag.num_nodes() {
            let cols: Vec<usize> = layout.columns(j).collect();
            let pcols = self.dag.parent_columns(j);
            let inv_s: Vec<f64> = cols.iter().map(|&c| 1.0 / std[c]).collect();
            let m_j: Vec<f64> = cols.iter().map(|&c| mean[c]).collect();
            let mech = match &self.mechanisms[j] {
                Mechanism::Root { mean: mu } => {
                    Mechanism::Root { mean: Array1::from_shape_fn(cols.len(), |a| (mu[a] - m_j[a]) * inv_s[a]) }
                }
                Mechanism::LinearGaussian { weights, bias } => {
                    let m_pa = Array1::from_iter(pcols.iter().map(|&c| mean[c]));
                    let w = Array2::from_shape_fn(weights.dim(), |(a, b)| weights[[a, b]] * std[pcols[b]] * inv_s[a]);
                    let shifted = weights.dot(&m_pa);
                    let b = Array1::from_shape_fn(cols.len(), |a| (shifted[a] + bias[a] - m_j[a]) * inv_s[a]);
                    Mechanism::LinearGaussian { weights: w, bias: b }
                }
                Mechanism::NonlinearAdditive { .. } => return Err(ScmError::NotLinearGaussian(j)),
            };
            mechs.push(mech);
            let c = &self.noise_covs[j];
            covs.push(Array2::from_shape_fn(c.dim(), |(a, b)| c[[a, b]] * inv_s[a] * inv_s[b]));
        }
        ScmSpec::new(self.dag.clone(), mechs, covs)
    }
}
