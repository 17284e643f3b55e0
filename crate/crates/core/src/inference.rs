//! Resampling tests for directed edges: sample splitting, a CEDM fitted on
//! the edge-deleted graph, Monte Carlo p-values from do-sampled replicates of
//! the child, multiple-testing corrections and an MMD calibration check.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{mcodec, CodecError};
use crate::dag::{Dag, DagError};
use crate::diffusion::{CedmModel, DiffusionSchedule, ModelError, TrainConfig};
use crate::metrics::{mmd_permutation_p, MetricsError};
use crate::rng::StreamKey;
use crate::sampler::{sample_do_rows, RowIntervention, SamplerError, SamplingModel};
use crate::scm::Dataset;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("range error: {0}")]
    Range(String),
    #[error("invalid hypothesis: {0}")]
    Hypothesis(String),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Disjoint random split into (train, infer) of sizes (n1, n − n1).
pub fn split_data(data: &Dataset, n1: usize, key: StreamKey) -> Result<(Dataset, Dataset), InferenceError> {
    let n = data.n();
    if n1 == 0 || n1 >= n {
        return Err(InferenceError::Range(format!("need 1 <= n1 < n, got n1 = {n1}, n = {n}")));
    }
    let perm = key.stream().permutation(n);
    let mut train = perm[..n1].to_vec();
    let mut infer = perm[n1..].to_vec();
    train.sort_unstable();
    infer.sort_unstable();
    Ok((data.select_rows(&train), data.select_rows(&infer)))
}

/// p = (1 + #{null ≥ observed}) / (1 + M).
pub fn monte_carlo_p(observed: f64, nulls: &[f64]) -> f64 {
    let exceed = nulls.iter().filter(|&&s| s >= observed).count();
    (1 + exceed) as f64 / (1 + nulls.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    #[default]
    Holm,
    Bh,
    None,
}

impl FromStr for Correction {
    type Err = InferenceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "holm" => Ok(Correction::Holm),
            "bh" | "benjamini-hochberg" => Ok(Correction::Bh),
            "none" => Ok(Correction::None),
            other => Err(InferenceError::Hypothesis(format!("unknown correction {other:?} (holm, bh, none)"))),
        }
    }
}

impl fmt::Display for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Correction::Holm => "holm",
            Correction::Bh => "bh",
            Correction::None => "none",
        })
    }
}

fn ascending(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    idx
}

/// Holm step-down adjusted p-values.
pub fn holm(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in ascending(p).iter().enumerate() {
        running = running.max(((m - rank) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}

/// Benjamini–Hochberg step-up adjusted p-values.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut out = vec![0.0; m];
    let mut running: f64 = 1.0;
    for (rank, &i) in ascending(p).iter().enumerate().rev() {
        running = running.min(m as f64 * p[i] / (rank + 1) as f64).min(1.0);
        out[i] = running;
    }
    out
}

pub fn adjust(p: &[f64], correction: Correction) -> Vec<f64> {
    match correction {
        Correction::Holm => holm(p),
        Correction::Bh => benjamini_hochberg(p),
        Correction::None => p.to_vec(),
    }
}

/// Hypothesis that none of `parents` is a direct cause of `child`. A single
/// parent is the single-edge test; several parents form a joint child-level
/// hypothesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeHypothesis {
    pub parents: Vec<usize>,
    pub child: usize,
}

impl EdgeHypothesis {
    pub fn single(from: usize, to: usize) -> Self {
        Self { parents: vec![from], child: to }
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents.iter().map(|&k| (k, self.child)).collect()
    }

    pub fn describe(&self, dag: &Dag) -> String {
        let ps: Vec<&str> = self.parents.iter().map(|&k| dag.label(k)).collect();
        if ps.len() == 1 {
            format!("{}->{}", ps[0], dag.label(self.child))
        } else {
            format!("({})->{}", ps.join(","), dag.label(self.child))
        }
    }

    fn validate(&self, dag: &Dag) -> Result<(), InferenceError> {
        let p = dag.num_nodes();
        if self.parents.is_empty() {
            return Err(InferenceError::Hypothesis("no hypothesised parents".into()));
        }
        let mut seen = self.parents.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.parents.len() {
            return Err(InferenceError::Hypothesis("repeated parent in hypothesis".into()));
        }
        if self.child >= p || self.parents.iter().any(|&k| k >= p || k == self.child) {
            return Err(InferenceError::Hypothesis("hypothesis references an invalid node".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CedmiConfig {
    pub schedule: DiffusionSchedule,
    pub train: TrainConfig,
    /// Training rows; the rest are used for the statistic.
    pub n1: usize,
    /// Monte Carlo replicates M.
    pub m_mc: usize,
    /// When false, both the fit and the statistic use all rows.
    pub split: bool,
    /// Permutations for the MMD diagnostic; 0 disables it.
    pub mmd_perm: usize,
}

impl Default for CedmiConfig {
    fn default() -> Self {
        Self {
            schedule: DiffusionSchedule::default(),
            train: TrainConfig::default(),
            n1: 500,
            m_mc: 100,
            split: true,
            mmd_perm: 199,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub hypothesis: String,
    pub observed: f64,
    pub null_stats: Vec<f64>,
    pub p_value: f64,
    pub diagnostic_mmd_p: Option<f64>,
    pub n1: usize,
    pub n2: usize,
    pub m_mc: usize,
    pub seed: u64,
    pub model_hash: Option<String>,
}

/// Working-graph parents of the child split into (hypothesised, remaining).
fn conditioning_sets(working: &Dag, hyp: &EdgeHypothesis) -> (Vec<usize>, Vec<usize>) {
    let rest: Vec<usize> = working.parents(hyp.child).iter().copied().filter(|k| !hyp.parents.contains(k)).collect();
    (hyp.parents.clone(), rest)
}

/// Null graph: the working graph with every hypothesised edge removed.
pub fn null_graph(working: &Dag, hyp: &EdgeHypothesis) -> Result<Dag, InferenceError> {
    let present: Vec<(usize, usize)> = hyp.edges().into_iter().filter(|&(k, j)| working.has_edge(k, j)).collect();
    Ok(working.delete_edges(&present)?)
}

/// Observed and null statistics given a sampler for the null graph. Rows of
/// `infer` are reused as intervention values for every replicate; replicate m
/// draws from `key.substream("replicate", m)`.
pub fn cedmi_statistics(
    infer: &Dataset,
    working: &Dag,
    hyp: &EdgeHypothesis,
    model: &dyn SamplingModel,
    m_mc: usize,
    key: StreamKey,
) -> Result<(f64, Vec<f64>, Array2<f64>), InferenceError> {
    hyp.validate(working)?;
    if m_mc == 0 {
        return Err(InferenceError::Range("need at least one Monte Carlo replicate".into()));
    }
    let (k_set, rest) = conditioning_sets(working, hyp);
    if model.dag().parents(hyp.child).iter().any(|p| k_set.contains(p)) {
        return Err(InferenceError::Hypothesis("sampler graph still contains a hypothesised edge".into()));
    }
    let xj = infer.block(hyp.child).to_owned();
    let xk = infer.blocks(&k_set);
    let xz = infer.blocks(&rest);
    let observed = mcodec(xj.view(), xk.view(), xz.view(), key.substream("ties", 0))?;
    let targets: Vec<usize> = k_set.iter().chain(&rest).copied().collect();
    let iv = RowIntervention { targets: targets.clone(), values: infer.blocks(&targets) };
    let draws: Vec<(f64, Option<Array2<f64>>)> = (0..m_mc)
        .into_par_iter()
        .map(|m| {
            let rk = key.substream("replicate", m as u64);
            let xm = sample_do_rows(model, &iv, &[hyp.child], rk.substream("sample", 0))?;
            let stat = mcodec(xm.view(), xk.view(), xz.view(), rk.substream("ties", 0))?;
            Ok((stat, (m == 0).then_some(xm)))
        })
        .collect::<Result<_, InferenceError>>()?;
    let mut nulls = Vec::with_capacity(m_mc);
    let mut first = None;
    for (s, x) in draws {
        nulls.push(s);
        if x.is_some() {
            first = x;
        }
    }
    Ok((observed, nulls, first.expect("m_mc >= 1")))
}

/// Permutation p-value for the joint law of (real child, real S) against one
/// synthetic replicate of the child next to the same S.
pub fn mmd_diagnostic(real: &Array2<f64>, synthetic: &Array2<f64>, n_perm: usize, key: StreamKey) -> Result<f64, InferenceError> {
    let r = mmd_permutation_p(real.view(), synthetic.view(), n_perm, key)?;
    Ok(r.p_value.expect("permutation p-value"))
}

/// Full edge test: split, fit the child's score on the null graph, compute
/// the observed statistic on the inference rows and calibrate it with
/// do-sampled replicates.
pub fn cedmi_test(
    data: &Dataset,
    working: &Dag,
    hyp: &EdgeHypothesis,
    config: &CedmiConfig,
    seed: u64,
) -> Result<TestReport, InferenceError> {
    let split_key = StreamKey::new(seed).substream("split", 0);
    cedmi_test_keyed(data, working, hyp, config, seed, split_key, StreamKey::new(seed).substream("hypothesis", 0))
}

fn cedmi_test_keyed(
    data: &Dataset,
    working: &Dag,
    hyp: &EdgeHypothesis,
    config: &CedmiConfig,
    seed: u64,
    split_key: StreamKey,
    key: StreamKey,
) -> Result<TestReport, InferenceError> {
    hyp.validate(working)?;
    if !data.matches(working) {
        return Err(ModelError::DataShape(format!(
            "data blocks {:?} do not match graph blocks {:?}",
            data.layout().dims(),
            working.block_dims()
        ))
        .into());
    }
    let (train, infer) = if config.split { split_data(data, config.n1, split_key)? } else { (data.clone(), data.clone()) };
    let null = null_graph(working, hyp)?;
    let model = CedmModel::train_nodes(&train, &null, config.schedule, &config.train, key.substream("train", 0).derive_seed(), &[hyp.child])?;
    let (observed, null_stats, first) = cedmi_statistics(&infer, working, hyp, &model, config.m_mc, key.substream("mc", 0))?;
    let diagnostic_mmd_p = if config.mmd_perm > 0 {
        let (k_set, rest) = conditioning_sets(working, hyp);
        let s: Vec<usize> = k_set.iter().chain(&rest).copied().collect();
        let xs = infer.blocks(&s);
        let real = concatenate![Axis(1), infer.block(hyp.child), xs];
        let synth = concatenate![Axis(1), first, xs];
        Some(mmd_diagnostic(&real, &synth, config.mmd_perm, key.substream("mmd", 0))?)
    } else {
        None
    };
    Ok(TestReport {
        hypothesis: hyp.describe(working),
        observed,
        p_value: monte_carlo_p(observed, &null_stats),
        null_stats,
        diagnostic_mmd_p,
        n1: train.n(),
        n2: infer.n(),
        m_mc: config.m_mc,
        seed,
        model_hash: Some(model.fingerprint()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiReport {
    pub reports: Vec<TestReport>,
    pub adjusted: Vec<f64>,
    pub correction: Correction,
}

/// One test per hypothesis, each with its own null graph and fit, on a
/// shared split; raw p-values are then adjusted.
pub fn cedmi_multi(
    data: &Dataset,
    working: &Dag,
    hyps: &[EdgeHypothesis],
    correction: Correction,
    config: &CedmiConfig,
    seed: u64,
) -> Result<MultiReport, InferenceError> {
    if hyps.is_empty() {
        return Err(InferenceError::Hypothesis("no hypotheses given".into()));
    }
    let split_key = StreamKey::new(seed).substream("split", 0);
    let reports = hyps
        .iter()
        .enumerate()
        .map(|(h, hyp)| {
            cedmi_test_keyed(data, working, hyp, config, seed, split_key, StreamKey::new(seed).substream("hypothesis", h as u64))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let raw: Vec<f64> = reports.iter().map(|r| r.p_value).collect();
    Ok(MultiReport { adjusted: adjust(&raw, correction), reports, correction })
}

/// Reference test for a hypothesis whose child has no other working parents:
/// the hypothesised parents' rows are permuted jointly, independently of the
/// child, and the statistic recomputed.
pub fn permutation_reference(
    data: &Dataset,
    working: &Dag,
    hyp: &EdgeHypothesis,
    n_perm: usize,
    seed: u64,
) -> Result<TestReport, InferenceError> {
    hyp.validate(working)?;
    let (k_set, rest) = conditioning_sets(working, hyp);
    if !rest.is_empty() {
        return Err(InferenceError::Hypothesis(format!(
            "{}: permutation reference needs a child with no other parents",
            hyp.describe(working)
        )));
    }
    if n_perm == 0 {
        return Err(InferenceError::Range("need at least one permutation".into()));
    }
    let key = StreamKey::new(seed).substream("permutation-reference", 0);
    let y = data.block(hyp.child).to_owned();
    let x = data.blocks(&k_set);
    let z = Array2::zeros((data.n(), 0));
    let observed = mcodec(y.view(), x.view(), z.view(), key.substream("ties", 0))?;
    let null_stats = (0..n_perm)
        .into_par_iter()
        .map(|m| {
            let rk = key.substream("perm", m as u64);
            let perm = rk.stream().permutation(data.n());
            let xp = x.select(Axis(0), &perm);
            Ok(mcodec(y.view(), xp.view(), z.view(), rk.substream("ties", 0))?)
        })
        .collect::<Result<Vec<f64>, InferenceError>>()?;
    Ok(TestReport {
        hypothesis: hyp.describe(working),
        observed,
        p_value: monte_carlo_p(observed, &null_stats),
        null_stats,
        diagnostic_mmd_p: None,
        n1: 0,
        n2: data.n(),
        m_mc: n_perm,
        seed,
        model_hash: None,
    })
}
