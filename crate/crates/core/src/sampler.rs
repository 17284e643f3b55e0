//! Reverse-time Euler–Maruyama integration of the per-node conditional
//! diffusions, joint sampling in topological order and do-interventional
//! sampling through the truncated factorisation.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::dag::Dag;
use crate::diffusion::{AnalyticScores, CedmModel, ConditionalScore, DiffusionSchedule, NormStats};
use crate::rng::{Stream, StreamKey};
use crate::scm::{Dataset, DatasetMeta, Intervention, Provenance, ScmError};

/// Trajectories leaving this box (standardised units) abort sampling.
pub const TRAJECTORY_GUARD: f64 = 1e6;

/// Rows integrated together; fixed so results never depend on scheduling.
const ROW_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("node {0} has no trained score network")]
    Untrained(String),
    #[error("reverse trajectory of node {node} left the ±1e6 box at diffusion time {t}")]
    Diverged { node: String, t: f64 },
    #[error(transparent)]
    Scm(#[from] ScmError),
}

/// Anything that provides conditional scores for a graph in standardised
/// coordinates together with the map back to data units.
pub trait SamplingModel: Sync {
    fn dag(&self) -> &Dag;
    fn norm(&self) -> &NormStats;
    fn schedule(&self) -> &DiffusionSchedule;
    fn has_score(&self, node: usize) -> bool;
    fn score(&self) -> &dyn ConditionalScore;
    /// Identifier written into sample provenance.
    fn hash(&self) -> Option<String> {
        None
    }
}

impl SamplingModel for CedmModel {
    fn dag(&self) -> &Dag {
        CedmModel::dag(self)
    }
    fn norm(&self) -> &NormStats {
        CedmModel::norm(self)
    }
    fn schedule(&self) -> &DiffusionSchedule {
        CedmModel::schedule(self)
    }
    fn has_score(&self, node: usize) -> bool {
        self.is_trained(node)
    }
    fn score(&self) -> &dyn ConditionalScore {
        self
    }
    fn hash(&self) -> Option<String> {
        Some(self.fingerprint())
    }
}

/// Exact linear-Gaussian scores plugged into the sampler. The SCM must be
/// expressed in the coordinates described by `norm` (identity norm for raw
/// coordinates).
pub struct OracleModel {
    scores: AnalyticScores,
    norm: NormStats,
    schedule: DiffusionSchedule,
}

impl OracleModel {
    pub fn new(scores: AnalyticScores, norm: NormStats, schedule: DiffusionSchedule) -> Self {
        Self { scores, norm, schedule }
    }

    /// Oracle in raw coordinates.
    pub fn raw(scores: AnalyticScores, schedule: DiffusionSchedule) -> Self {
        let w = scores.spec().dag().total_dim();
        Self::new(scores, NormStats::identity(w), schedule)
    }
}

impl SamplingModel for OracleModel {
    fn dag(&self) -> &Dag {
        self.scores.spec().dag()
    }
    fn norm(&self) -> &NormStats {
        &self.norm
    }
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }
    fn has_score(&self, _node: usize) -> bool {
        true
    }
    fn score(&self) -> &dyn ConditionalScore {
        &self.scores
    }
}

/// One row's reverse path: states at diffusion times T, T − h, …, t0.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseTrajectory {
    pub node: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

fn integrate_chunk(
    score: &dyn ConditionalScore,
    node: usize,
    d: usize,
    pa: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    streams: &mut [Stream],
    mut trajectory: Option<&mut ReverseTrajectory>,
) -> Result<Array2<f64>, f64> {
    let n = pa.nrows();
    let h = schedule.step();
    let sqrt_h = h.sqrt();
    let mut x = Array2::zeros((n, d));
    for (mut row, s) in x.rows_mut().into_iter().zip(streams.iter_mut()) {
        for v in row.iter_mut() {
            *v = s.standard_normal();
        }
    }
    if let Some(tr) = trajectory.as_deref_mut() {
        tr.times.push(schedule.t_end);
        tr.states.push(x.row(0).to_vec());
    }
    for k in 0..schedule.n_steps {
        let t = schedule.t_end - k as f64 * h;
        let sc = score.score(node, x.view(), pa, t);
        for ((mut row, srow), st) in x.rows_mut().into_iter().zip(sc.rows()).zip(streams.iter_mut()) {
            for (v, &s) in row.iter_mut().zip(srow) {
                *v += h * (0.5 * *v + s) + sqrt_h * st.standard_normal();
            }
        }
        let t_next = schedule.t_end - (k + 1) as f64 * h;
        if x.iter().any(|v| !(v.abs() <= TRAJECTORY_GUARD)) {
            return Err(t_next);
        }
        if let Some(tr) = trajectory.as_deref_mut() {
            tr.times.push(if k + 1 == schedule.n_steps { schedule.t0 } else { t_next });
            tr.states.push(x.row(0).to_vec());
        }
    }
    Ok(x)
}

/// Integrates dX = [X/2 + s_j(X, x_pa, T − τ)] dτ + dW̄ from X ~ N(0, I) at
/// τ = 0 to τ = T − t0 for every row of `pa` (standardised parents). Row `i`
/// draws all of its noise from `key.substream("row", i)`.
pub fn reverse_sample_node(
    model: &dyn SamplingModel,
    node: usize,
    pa: ArrayView2<f64>,
    key: StreamKey,
) -> Result<Array2<f64>, SamplerError> {
    let dag = model.dag();
    check_node(model, node)?;
    if pa.ncols() != dag.parent_dim(node) {
        return Err(SamplerError::ModelMismatch(format!(
            "node {} needs {} parent columns, got {}",
            dag.label(node),
            dag.parent_dim(node),
            pa.ncols()
        )));
    }
    let d = dag.dim(node);
    let n = pa.nrows();
    let mut out = Array2::zeros((n, d));
    let chunks: Vec<(usize, Result<Array2<f64>, f64>)> = (0..n.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * ROW_CHUNK;
            let hi = (lo + ROW_CHUNK).min(n);
            let mut streams: Vec<Stream> = (lo..hi).map(|i| key.substream("row", i as u64).stream()).collect();
            let res = integrate_chunk(model.score(), node, d, pa.slice(s![lo..hi, ..]), model.schedule(), &mut streams, None);
            (lo, res)
        })
        .collect();
    for (lo, res) in chunks {
        let block = res.map_err(|t| SamplerError::Diverged { node: dag.label(node).to_string(), t })?;
        out.slice_mut(s![lo..lo + block.nrows(), ..]).assign(&block);
    }
    Ok(out)
}

/// Single-row reverse sample with its full path. The final state equals
/// row 0 of [`reverse_sample_node`] on the same key.
pub fn reverse_trajectory(
    model: &dyn SamplingModel,
    node: usize,
    pa_row: &[f64],
    key: StreamKey,
) -> Result<ReverseTrajectory, SamplerError> {
    check_node(model, node)?;
    let dag = model.dag();
    if pa_row.len() != dag.parent_dim(node) {
        return Err(SamplerError::ModelMismatch("parent row width".into()));
    }
    let pa = ArrayView2::from_shape((1, pa_row.len()), pa_row).expect("row");
    let mut tr = ReverseTrajectory { node, times: Vec::new(), states: Vec::new() };
    let mut streams = vec![key.substream("row", 0).stream()];
    integrate_chunk(model.score(), node, dag.dim(node), pa, model.schedule(), &mut streams, Some(&mut tr))
        .map_err(|t| SamplerError::Diverged { node: dag.label(node).to_string(), t })?;
    Ok(tr)
}

fn check_node(model: &dyn SamplingModel, node: usize) -> Result<(), SamplerError> {
    if node >= model.dag().num_nodes() {
        return Err(SamplerError::ModelMismatch(format!("node {node} out of range")));
    }
    if !model.has_score(node) {
        return Err(SamplerError::Untrained(model.dag().label(node).to_string()));
    }
    Ok(())
}

/// Per-row intervention: `values` has one row per sample and the target
/// blocks' columns concatenated in target order (data units).
#[derive(Debug, Clone, PartialEq)]
pub struct RowIntervention {
    pub targets: Vec<usize>,
    pub values: Array2<f64>,
}

/// Samples the requested `outputs` nodes (data units, blocks concatenated in
/// the given order) under per-row interventions. Only the outputs and their
/// non-intervened ancestors in the mutilated graph are integrated. Node `j`
/// uses `key.substream("node", j)`.
pub fn sample_do_rows(
    model: &dyn SamplingModel,
    iv: &RowIntervention,
    outputs: &[usize],
    key: StreamKey,
) -> Result<Array2<f64>, SamplerError> {
    let dag = model.dag();
    let p = dag.num_nodes();
    let n = iv.values.nrows();
    let mut is_target = vec![false; p];
    let mut width = 0;
    for &t in &iv.targets {
        if t >= p || std::mem::replace(&mut is_target[t], true) {
            return Err(ScmError::Dimension(format!("invalid or repeated intervention target {t}")).into());
        }
        width += dag.dim(t);
    }
    if iv.values.ncols() != width {
        return Err(ScmError::Dimension(format!("intervention values need {width} columns, got {}", iv.values.ncols())).into());
    }
    if let Some(&bad) = outputs.iter().find(|&&j| j >= p) {
        return Err(SamplerError::ModelMismatch(format!("output node {bad} out of range")));
    }
    // Nodes required: outputs plus ancestors reached without crossing a target.
    let mut needed = vec![false; p];
    let mut stack: Vec<usize> = outputs.to_vec();
    while let Some(j) = stack.pop() {
        if std::mem::replace(&mut needed[j], true) || is_target[j] {
            continue;
        }
        stack.extend_from_slice(dag.parents(j));
    }
    let layout = dag.layout();
    let norm = model.norm();
    let mut z = Array2::<f64>::zeros((n, dag.total_dim()));
    let mut off = 0;
    for &t in &iv.targets {
        for c in layout.columns(t) {
            let col = iv.values.column(off);
            z.column_mut(c).assign(&col.mapv(|v| (v - norm.mean[c]) / norm.std[c]));
            off += 1;
        }
    }
    for &j in dag.topo_order() {
        if !needed[j] || is_target[j] {
            continue;
        }
        let pa = z.select(Axis(1), &dag.parent_columns(j));
        let xj = reverse_sample_node(model, j, pa.view(), key.substream("node", j as u64))?;
        z.slice_mut(s![.., layout.columns(j)]).assign(&xj);
    }
    let out_cols = layout.gather_columns(outputs);
    let mut out = Array2::zeros((n, out_cols.len()));
    for (k, &c) in out_cols.iter().enumerate() {
        out.column_mut(k).assign(&z.column(c).mapv(|v| v * norm.std[c] + norm.mean[c]));
    }
    // Intervened columns are reported exactly as given.
    let mut off = 0;
    for &t in &iv.targets {
        for c in layout.columns(t) {
            if let Some(k) = out_cols.iter().position(|&oc| oc == c) {
                out.column_mut(k).assign(&iv.values.column(off));
            }
            off += 1;
        }
    }
    Ok(out)
}

fn sample_all(model: &dyn SamplingModel, intervention: &Intervention, n: usize, seed: u64) -> Result<Array2<f64>, SamplerError> {
    let dag = model.dag();
    let flat = intervention.flat_values();
    let values = Array2::from_shape_fn((n, flat.len()), |(_, c)| flat[c]);
    let iv = RowIntervention { targets: intervention.targets().to_vec(), values };
    let all: Vec<usize> = (0..dag.num_nodes()).collect();
    sample_do_rows(model, &iv, &all, StreamKey::new(seed).substream("sample", 0))
}

/// n rows from the learned observational law.
pub fn sample_joint(model: &dyn SamplingModel, n: usize, seed: u64) -> Result<Dataset, SamplerError> {
    let values = sample_all(model, &Intervention::empty(), n, seed)?;
    let dag = model.dag();
    Ok(Dataset::new(
        values,
        dag.layout().clone(),
        DatasetMeta { seed: Some(seed), provenance: Provenance::synthetic(dag, &Intervention::empty()) },
    )?)
}

/// n rows from the learned law under do(X_S = x*_S).
pub fn sample_do(model: &dyn SamplingModel, intervention: &Intervention, n: usize, seed: u64) -> Result<Dataset, SamplerError> {
    let dag = model.dag();
    let checked = Intervention::new(dag, intervention.targets().to_vec(), intervention.values().to_vec())?;
    let values = sample_all(model, &checked, n, seed)?;
    Ok(Dataset::new(
        values,
        dag.layout().clone(),
        DatasetMeta { seed: Some(seed), provenance: Provenance::synthetic(dag, &checked) },
    )?)
}

/// Column means and standard errors of [`sample_do`] output.
pub fn estimate_do_expectation(
    model: &dyn SamplingModel,
    intervention: &Intervention,
    n: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), SamplerError> {
    if n < 2 {
        return Err(ScmError::Dimension("need at least 2 samples".into()).into());
    }
    let ds = sample_do(model, intervention, n, seed)?;
    Ok(column_mean_se(ds.values()))
}

pub fn column_mean_se(v: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = v.nrows() as f64;
    let mut means = Vec::new();
    let mut ses = Vec::new();
    for c in v.columns() {
        let m = c.sum() / n;
        let var = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        means.push(m);
        ses.push((var / n).sqrt());
    }
    (means, ses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{Mechanism, ScmSpec};
    use ndarray::array;

    fn root_normal() -> OracleModel {
        let dag = Dag::new(vec![1], []).unwrap();
        let spec = ScmSpec::new(dag, vec![Mechanism::Root { mean: array![0.0] }], vec![array![[1.0]]]).unwrap();
        OracleModel::raw(AnalyticScores::new(spec).unwrap(), DiffusionSchedule::default())
    }

    fn chain(c: f64) -> ScmSpec {
        let dag = Dag::new(vec![1, 1, 1], [(0, 1), (1, 2)]).unwrap();
        ScmSpec::new(
            dag,
            vec![
                Mechanism::Root { mean: array![0.0] },
                Mechanism::LinearGaussian { weights: array![[1.0]], bias: array![0.0] },
                Mechanism::LinearGaussian { weights: array![[c]], bias: array![0.5] },
            ],
            vec![array![[1.0]], array![[0.5]], array![[1.0]]],
        )
        .unwrap()
    }

    /// Kolmogorov–Smirnov distance to N(0, 1).
    fn ks_normal(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let phi = |x: f64| 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
        v.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = phi(x);
                (f - i as f64 / n).abs().max((i as f64 + 1.0) / n - f)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn standard_normal_is_its_own_reverse_target() {
        let m = root_normal();
        let x = reverse_sample_node(&m, 0, Array2::zeros((10_000, 0)).view(), StreamKey::new(3)).unwrap();
        let d = ks_normal(x.column(0).to_vec());
        // KS critical value at level 0.01 for n = 10^4.
        assert!(d < 1.628 / 100.0, "{d}");
    }

    #[test]
    fn single_step_and_determinism() {
        let mut m = root_normal();
        m.schedule = DiffusionSchedule::new(1e-3, 5.0, 1).unwrap();
        let a = reverse_sample_node(&m, 0, Array2::zeros((3, 0)).view(), StreamKey::new(1)).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        let b = reverse_sample_node(&m, 0, Array2::zeros((3, 0)).view(), StreamKey::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trajectory_matches_batch_row() {
        let spec = chain(2.0);
        let m = OracleModel::raw(AnalyticScores::new(spec).unwrap(), DiffusionSchedule::new(1e-3, 5.0, 50).unwrap());
        let pa = array![[0.7]];
        let key = StreamKey::new(5);
        let tr = reverse_trajectory(&m, 2, &[0.7], key).unwrap();
        let x = reverse_sample_node(&m, 2, pa.view(), key).unwrap();
        assert_eq!(tr.states.last().unwrap()[0], x[[0, 0]]);
        assert_eq!(tr.times.len(), 51);
        assert_eq!(tr.states.len(), 51);
        assert!(tr.times.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*tr.times.last().unwrap(), 1e-3);
    }

    #[test]
    fn rows_do_not_depend_on_batch_composition() {
        let spec = chain(2.0);
        let m = OracleModel::raw(AnalyticScores::new(spec).unwrap(), DiffusionSchedule::new(1e-3, 5.0, 20).unwrap());
        let pa = StreamKey::new(2).stream().gaussian_matrix(600, 1);
        let all = reverse_sample_node(&m, 2, pa.view(), StreamKey::new(8)).unwrap();
        let head = reverse_sample_node(&m, 2, pa.slice(s![..300, ..]), StreamKey::new(8)).unwrap();
        assert_eq!(all.slice(s![..300, ..]), head);
    }

    #[test]
    fn do_on_everything_gives_constant_rows() {
        let spec = chain(2.0);
        let m = OracleModel::raw(AnalyticScores::new(spec.clone()).unwrap(), DiffusionSchedule::default());
        let iv = Intervention::new(spec.dag(), vec![0, 1, 2], vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let ds = sample_do(&m, &iv, 10, 1).unwrap();
        for r in ds.values().rows() {
            assert_eq!(r.to_vec(), vec![1.0, 2.0, 3.0]);
        }
        let (mean, se) = estimate_do_expectation(&m, &iv, 10, 1).unwrap();
        assert_eq!(mean, vec![1.0, 2.0, 3.0]);
        assert_eq!(se, vec![0.0; 3]);
    }

    #[test]
    fn do_expectation_on_linear_chain() {
        let spec = chain(2.0);
        let m = OracleModel::raw(AnalyticScores::new(spec.clone()).unwrap(), DiffusionSchedule::default());
        let c = 1.5;
        let iv = Intervention::new(spec.dag(), vec![1], vec![vec![c]]).unwrap();
        let (mean, se) = estimate_do_expectation(&m, &iv, 4000, 2).unwrap();
        assert_eq!(mean[1], c);
        assert!((mean[2] - (2.0 * c + 0.5)).abs() <= 3.0 * se[2], "{} ± {}", mean[2], se[2]);
        assert!(mean[0].abs() <= 3.0 * se[0]);
        let (_, se4) = estimate_do_expectation(&m, &iv, 16_000, 3).unwrap();
        let ratio = se[2] / se4[2];
        assert!((ratio - 2.0).abs() < 0.4, "{ratio}");
    }

    #[test]
    fn untrained_or_mismatched_inputs_fail() {
        let spec = chain(1.0);
        let m = OracleModel::raw(AnalyticScores::new(spec).unwrap(), DiffusionSchedule::default());
        assert!(matches!(
            reverse_sample_node(&m, 2, Array2::zeros((2, 3)).view(), StreamKey::new(0)),
            Err(SamplerError::ModelMismatch(_))
        ));
        let iv = RowIntervention { targets: vec![1], values: Array2::zeros((4, 2)) };
        assert!(matches!(sample_do_rows(&m, &iv, &[2], StreamKey::new(0)), Err(SamplerError::Scm(_))));
    }

    #[test]
    fn divergence_is_reported() {
        struct Explode;
        impl ConditionalScore for Explode {
            fn score(&self, _: usize, x: ArrayView2<f64>, _: ArrayView2<f64>, _: f64) -> Array2<f64> {
                x.mapv(|v| 1e9 * (v.abs() + 1.0))
            }
        }
        struct M(Dag, NormStats, DiffusionSchedule);
        impl SamplingModel for M {
            fn dag(&self) -> &Dag {
                &self.0
            }
            fn norm(&self) -> &NormStats {
                &self.1
            }
            fn schedule(&self) -> &DiffusionSchedule {
                &self.2
            }
            fn has_score(&self, _: usize) -> bool {
                true
            }
            fn score(&self) -> &dyn ConditionalScore {
                &Explode
            }
        }
        let m = M(Dag::new(vec![1], []).unwrap(), NormStats::identity(1), DiffusionSchedule::default());
        assert!(matches!(
            reverse_sample_node(&m, 0, Array2::zeros((2, 0)).view(), StreamKey::new(0)),
            Err(SamplerError::Diverged { .. })
        ));
    }
}
