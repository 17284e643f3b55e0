use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{toeplitz_cov, Family, Intervention, Mechanism, NonlinearTerm, ScmError, ScmSpec};
use crate::dag::Dag;
use crate::rng::{Stream, StreamKey};

/// Protein order used for the 11-node signalling network and its CSV columns.
pub const SACHS_PROTEINS: [&str; 11] =
    ["Raf", "Mek", "PLCg", "PIP2", "PIP3", "Erk", "Akt", "PKA", "PKC", "p38", "JNK"];

const SACHS_BASE_EDGES: [(&str, &str); 14] = [
    ("PIP3", "PIP2"),
    ("PLCg", "PIP2"),
    ("Mek", "Erk"),
    ("PKA", "Erk"),
    ("PKA", "Akt"),
    ("PKA", "Mek"),
    ("PKA", "Raf"),
    ("PKA", "JNK"),
    ("PKA", "p38"),
    ("PKC", "Mek"),
    ("PKC", "Raf"),
    ("PKC", "JNK"),
    ("PKC", "p38"),
    ("Raf", "Mek"),
];

const SACHS_NETWORK_EXTRA: [(&str, &str); 3] = [("PLCg", "PIP3"), ("Erk", "Akt"), ("PKC", "PKA")];

const SACHS_SUPER_EXTRA: [(&str, &str); 6] = [
    ("PIP3", "PLCg"),
    ("PIP3", "Akt"),
    ("PIP2", "PKC"),
    ("PLCg", "PKC"),
    ("Erk", "Akt"),
    ("PKC", "PKA"),
];

fn sachs_dag(extra: &[(&str, &str)]) -> Dag {
    let labels = SACHS_PROTEINS.iter().map(|s| s.to_string()).collect();
    let edges: Vec<(&str, &str)> = SACHS_BASE_EDGES.iter().chain(extra).copied().collect();
    Dag::from_labelled_edges(vec![1; 11], labels, &edges).expect("static protein network is acyclic")
}

/// The 17-edge consensus signalling network used as a simulation benchmark.
pub fn sachs_network() -> Dag {
    sachs_dag(&SACHS_NETWORK_EXTRA)
}

/// The 20-edge working graph for the cytometry edge tests: the consensus
/// base edges united with the contested linkages.
pub fn sachs_super_dag() -> Dag {
    sachs_dag(&SACHS_SUPER_EXTRA)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Chain,
    Hub,
    Random,
    Sachs,
    Fork,
    Chain3,
}

impl Benchmark {
    pub const ALL: [Benchmark; 6] =
        [Benchmark::Chain, Benchmark::Hub, Benchmark::Random, Benchmark::Sachs, Benchmark::Fork, Benchmark::Chain3];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Chain => "chain",
            Benchmark::Hub => "hub",
            Benchmark::Random => "random",
            Benchmark::Sachs => "sachs",
            Benchmark::Fork => "fork",
            Benchmark::Chain3 => "chain3",
        }
    }

    fn default_slate_dim(self) -> usize {
        match self {
            Benchmark::Chain | Benchmark::Hub | Benchmark::Random => 5,
            Benchmark::Fork | Benchmark::Chain3 => 10,
            Benchmark::Sachs => 1,
        }
    }

    /// (γ, η) defaults for the three-slate systems: chain3 has no direct
    /// Y1 → Y3 effect, fork has no Y2 → Y3 effect.
    fn default_strengths(self) -> (f64, f64) {
        match self {
            Benchmark::Chain3 => (0.0, 1.0),
            _ => (1.0, 0.0),
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = ScmError;

    fn from_str(s: &str) -> Result<Self, ScmError> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| ScmError::UnknownBenchmark(s.to_string()))
    }
}

/// Mechanism family used for non-root nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Linear,
    Tanh,
    Sine,
    Softsign,
    /// Family chosen by node index, cycling tanh, sine, softsign.
    #[default]
    Mixed,
}

impl Nonlinearity {
    fn family(self, node: usize) -> Option<Family> {
        match self {
            Nonlinearity::Linear => None,
            Nonlinearity::Tanh => Some(Family::TanhLinear),
            Nonlinearity::Sine => Some(Family::SineLinear),
            Nonlinearity::Softsign => Some(Family::QuadraticSaturating),
            Nonlinearity::Mixed => Some(Family::ALL[node % 3]),
        }
    }
}

impl FromStr for Nonlinearity {
    type Err = ScmError;

    fn from_str(s: &str) -> Result<Self, ScmError> {
        Ok(match s {
            "linear" => Nonlinearity::Linear,
            "tanh" => Nonlinearity::Tanh,
            "sine" => Nonlinearity::Sine,
            "softsign" => Nonlinearity::Softsign,
            "mixed" => Nonlinearity::Mixed,
            other => return Err(ScmError::InvalidParameter(format!("unknown nonlinearity {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkParams {
    /// Edge probability of the random graph.
    pub edge_prob: f64,
    pub nonlinearity: Nonlinearity,
    /// Within-slate noise correlation, Σ_ab = ρ^{|a−b|}.
    pub rho: f64,
    pub seed: u64,
    /// Direct Y1 → Y3 strength of the three-slate systems.
    pub gamma: Option<f64>,
    /// Direct Y2 → Y3 strength of the three-slate systems.
    pub eta: Option<f64>,
    pub slate_dim: Option<usize>,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self { edge_prob: 0.5, nonlinearity: Nonlinearity::Mixed, rho: 0.5, seed: 0, gamma: None, eta: None, slate_dim: None }
    }
}

const TERM_SCALE: f64 = 1.5;

/// Entries ±U[0.5, 1.5] scaled by 1/√fan_in, so every parent coordinate
/// has a non-vanishing effect.
fn signed_weights(stream: &mut Stream, rows: usize, cols: usize) -> Array2<f64> {
    let norm = 1.0 / (cols.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        let m = stream.uniform_range(0.5, 1.5);
        if stream.uniform() < 0.5 { -m * norm } else { m * norm }
    })
}

fn node_mechanism(dag: &Dag, node: usize, nonlinearity: Nonlinearity, stream: &mut Stream) -> Mechanism {
    let d = dag.dim(node);
    if dag.is_root(node) {
        return Mechanism::Root { mean: Array1::zeros(d) };
    }
    let weights = signed_weights(stream, d, dag.parent_dim(node));
    let bias = Array1::zeros(d);
    match nonlinearity.family(node) {
        None => Mechanism::LinearGaussian { weights, bias },
        Some(family) => Mechanism::NonlinearAdditive {
            terms: vec![NonlinearTerm { family, weights, scale: TERM_SCALE }],
            bias,
        },
    }
}

fn slate_labels(p: usize) -> Vec<String> {
    (1..=p).map(|i| format!("Y{i}")).collect()
}

/// Builds one of the registered benchmark SCMs.
pub fn build_benchmark(which: Benchmark, params: &BenchmarkParams) -> Result<ScmSpec, ScmError> {
    if !(0.0..=1.0).contains(&params.edge_prob) {
        return Err(ScmError::InvalidParameter(format!("edge_prob {} outside [0, 1]", params.edge_prob)));
    }
    if !(params.rho.abs() < 1.0) {
        return Err(ScmError::InvalidParameter(format!("rho {} must lie in (−1, 1)", params.rho)));
    }
    let slate = params.slate_dim.unwrap_or(which.default_slate_dim());
    if slate == 0 {
        return Err(ScmError::InvalidParameter("slate_dim must be at least 1".into()));
    }
    let root = StreamKey::new(params.seed).substream("benchmark", 0);
    match which {
        Benchmark::Chain | Benchmark::Hub | Benchmark::Random => {
            let edges: Vec<(usize, usize)> = match which {
                Benchmark::Chain => (0..5).map(|i| (i, i + 1)).collect(),
                Benchmark::Hub => (1..6).map(|k| (0, k)).collect(),
                _ => {
                    let mut s = root.substream("edges", 0).stream();
                    let mut e = Vec::new();
                    for i in 0..6 {
                        for j in i + 1..6 {
                            if s.uniform() < params.edge_prob {
                                e.push((i, j));
                            }
                        }
                    }
                    e
                }
            };
            let dag = Dag::with_labels(vec![slate; 6], slate_labels(6), edges)?;
            let mechs = (0..6)
                .map(|j| node_mechanism(&dag, j, params.nonlinearity, &mut root.substream("node", j as u64).stream()))
                .collect();
            ScmSpec::new(dag, mechs, vec![toeplitz_cov(slate, params.rho); 6])
        }
        Benchmark::Sachs => {
            let dag = sachs_network();
            let mechs = (0..11)
                .map(|j| node_mechanism(&dag, j, params.nonlinearity, &mut root.substream("node", j as u64).stream()))
                .collect();
            ScmSpec::new(dag, mechs, vec![Array2::eye(1); 11])
        }
        Benchmark::Fork | Benchmark::Chain3 => three_slate(which, params, slate, root),
    }
}

/// Y1 root, Y1 → Y2, and
/// Y3 = γ f(Y1) + η g(Y2) + γη h(Y1, Y2) + ε
/// with f tanh, g softsign and h tanh over both slates. Every term is a
/// pure `scale · φ(Wx)` so the strengths multiply the whole term.
fn three_slate(which: Benchmark, params: &BenchmarkParams, d: usize, root: StreamKey) -> Result<ScmSpec, ScmError> {
    let (g0, e0) = which.default_strengths();
    let gamma = params.gamma.unwrap_or(g0);
    let eta = params.eta.unwrap_or(e0);
    let mut edges = vec![(0, 1)];
    if gamma != 0.0 {
        edges.push((0, 2));
    }
    if eta != 0.0 {
        edges.push((1, 2));
    }
    let dag = Dag::with_labels(vec![d; 3], slate_labels(3), edges)?;
    let linear = params.nonlinearity == Nonlinearity::Linear;

    let mut s2 = root.substream("node", 1).stream();
    let w2 = signed_weights(&mut s2, d, d);
    let m2 = if linear {
        Mechanism::LinearGaussian { weights: w2, bias: Array1::zeros(d) }
    } else {
        Mechanism::NonlinearAdditive {
            terms: vec![NonlinearTerm { family: Family::TanhLinear, weights: w2, scale: TERM_SCALE }],
            bias: Array1::zeros(d),
        }
    };

    let mut s3 = root.substream("node", 2).stream();
    let wf = signed_weights(&mut s3, d, d);
    let wg = signed_weights(&mut s3, d, d);
    let wh = signed_weights(&mut s3, d, 2 * d);
    // Parent vector of Y3 is the ascending concatenation of its parents.
    let r = dag.parent_dim(2);
    let place = |block: &Array2<f64>, slot: usize| {
        let mut w = Array2::zeros((d, r));
        w.slice_mut(ndarray::s![.., slot * d..(slot + 1) * d]).assign(block);
        w
    };
    let y1_slot = (gamma != 0.0).then_some(0);
    let y2_slot = (eta != 0.0).then_some(if gamma != 0.0 { 1 } else { 0 });
    let m3 = if linear {
        let mut w = Array2::zeros((d, r));
        if let Some(s) = y1_slot {
            w = w + place(&wf, s).mapv(|v| gamma * v);
        }
        if let Some(s) = y2_slot {
            w = w + place(&wg, s).mapv(|v| eta * v);
        }
        if gamma * eta != 0.0 {
            w = w + wh.mapv(|v| gamma * eta * v);
        }
        Mechanism::LinearGaussian { weights: w, bias: Array1::zeros(d) }
    } else {
        let mut terms = Vec::new();
        if let Some(s) = y1_slot {
            terms.push(NonlinearTerm { family: Family::TanhLinear, weights: place(&wf, s), scale: gamma * TERM_SCALE });
        }
        if let Some(s) = y2_slot {
            terms.push(NonlinearTerm { family: Family::QuadraticSaturating, weights: place(&wg, s), scale: eta * TERM_SCALE });
        }
        if gamma * eta != 0.0 {
            terms.push(NonlinearTerm {
                family: Family::TanhLinear,
                weights: wh,
                scale: gamma * eta * TERM_SCALE,
            });
        }
        Mechanism::NonlinearAdditive { terms, bias: Array1::zeros(d) }
    };
    let mechs = vec![Mechanism::Root { mean: Array1::zeros(d) }, m2, m3];
    ScmSpec::new(dag, mechs, vec![toeplitz_cov(d, params.rho); 3])
}

/// Nodes intervened on by default for each benchmark.
pub fn default_targets(which: Benchmark, dag: &Dag) -> Vec<usize> {
    match which {
        Benchmark::Chain | Benchmark::Hub | Benchmark::Random => vec![1, 4],
        Benchmark::Sachs => ["PIP3", "p38", "Raf", "Erk"]
            .iter()
            .map(|l| dag.index_of(l).expect("protein label"))
            .collect(),
        Benchmark::Fork | Benchmark::Chain3 => vec![1],
    }
}

/// Default intervention: each target coordinate fixed at the 75th percentile
/// of its observational marginal, estimated from 20000 draws.
pub fn default_intervention(spec: &ScmSpec, which: Benchmark, seed: u64) -> Result<Intervention, ScmError> {
    let targets = default_targets(which, spec.dag());
    let obs = spec.sample_observational_keyed(20_000, StreamKey::new(seed).substream("percentile", 0))?;
    let values = targets
        .iter()
        .map(|&t| {
            obs.block(t)
                .columns()
                .into_iter()
                .map(|c| {
                    let mut v = c.to_vec();
                    v.sort_by(f64::total_cmp);
                    quantile_sorted(&v, 0.75)
                })
                .collect()
        })
        .collect();
    Intervention::new(spec.dag(), targets, values)
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_layout() {
        let spec = build_benchmark(Benchmark::Chain, &BenchmarkParams::default()).unwrap();
        let dag = spec.dag();
        assert_eq!(dag.block_dims(), &[5; 6]);
        assert_eq!(dag.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        assert_eq!(dag.total_dim(), 30);
    }

    #[test]
    fn hub_out_degrees() {
        let spec = build_benchmark(Benchmark::Hub, &BenchmarkParams::default()).unwrap();
        assert_eq!(spec.dag().children(0).len(), 5);
        assert!((1..6).all(|k| spec.dag().children(k).is_empty()));
        assert_eq!(spec.dag().ancestors(3).into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn random_edges_are_forward_and_seeded() {
        let p = BenchmarkParams { seed: 17, ..Default::default() };
        let a = build_benchmark(Benchmark::Random, &p).unwrap();
        let b = build_benchmark(Benchmark::Random, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.dag().edges().all(|(i, j)| i < j));
        // Edge frequency over many seeds is close to edge_prob.
        let total: usize = (0..200)
            .map(|s| build_benchmark(Benchmark::Random, &BenchmarkParams { seed: s, ..Default::default() }).unwrap())
            .map(|s| s.dag().num_edges())
            .sum();
        let rate = total as f64 / (200.0 * 15.0);
        assert!((rate - 0.5).abs() < 0.03, "{rate}");
        let none = BenchmarkParams { edge_prob: 0.0, ..Default::default() };
        assert_eq!(build_benchmark(Benchmark::Random, &none).unwrap().dag().num_edges(), 0);
    }

    #[test]
    fn sachs_graphs() {
        let net = sachs_network();
        assert_eq!(net.num_edges(), 17);
        let sup = sachs_super_dag();
        assert_eq!(sup.num_edges(), 20);
        let pkc = sup.index_of("PKC").unwrap();
        let mut pa: Vec<&str> = sup.parents(pkc).iter().map(|&k| sup.label(k)).collect();
        pa.sort_unstable();
        assert_eq!(pa, vec!["PIP2", "PLCg"]);
        let akt = sup.index_of("Akt").unwrap();
        let mut pa: Vec<&str> = sup.parents(akt).iter().map(|&k| sup.label(k)).collect();
        pa.sort_unstable();
        assert_eq!(pa, vec!["Erk", "PIP3", "PKA"]);
        let spec = build_benchmark(Benchmark::Sachs, &BenchmarkParams::default()).unwrap();
        assert_eq!(spec.dag().total_dim(), 11);
    }

    #[test]
    fn three_slate_edges_follow_strengths() {
        let chain3 = build_benchmark(Benchmark::Chain3, &BenchmarkParams::default()).unwrap();
        assert_eq!(chain3.dag().edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
        assert_eq!(chain3.dag().block_dims(), &[10, 10, 10]);
        let fork = build_benchmark(Benchmark::Fork, &BenchmarkParams::default()).unwrap();
        assert_eq!(fork.dag().edges().collect::<Vec<_>>(), vec![(0, 1), (0, 2)]);
        let alt = build_benchmark(Benchmark::Fork, &BenchmarkParams { eta: Some(3.0), ..Default::default() }).unwrap();
        assert_eq!(alt.dag().num_edges(), 3);
        let Mechanism::NonlinearAdditive { terms, .. } = alt.mechanism(2) else { panic!() };
        assert_eq!(terms.len(), 3);
    }

    #[test]
    fn linear_three_slate_is_linear_gaussian() {
        let p = BenchmarkParams { nonlinearity: Nonlinearity::Linear, slate_dim: Some(2), ..Default::default() };
        let spec = build_benchmark(Benchmark::Chain3, &p).unwrap();
        assert!(spec.is_linear_gaussian());
        assert_eq!(spec.dag().total_dim(), 6);
    }

    #[test]
    fn unknown_name() {
        assert_eq!("tree".parse::<Benchmark>().unwrap_err(), ScmError::UnknownBenchmark("tree".into()));
        assert_eq!("chain3".parse::<Benchmark>().unwrap(), Benchmark::Chain3);
    }

    #[test]
    fn bad_params() {
        let p = BenchmarkParams { edge_prob: 1.5, ..Default::default() };
        assert!(matches!(build_benchmark(Benchmark::Random, &p), Err(ScmError::InvalidParameter(_))));
    }

    #[test]
    fn percentile_intervention() {
        let spec = build_benchmark(Benchmark::Chain, &BenchmarkParams::default()).unwrap();
        let iv = default_intervention(&spec, Benchmark::Chain, 3).unwrap();
        assert_eq!(iv.targets(), &[1, 4]);
        // Y1 is standard normal per coordinate; its 75th percentile is 0.674.
        let spec_root = build_benchmark(Benchmark::Fork, &BenchmarkParams::default()).unwrap();
        let obs = spec_root.sample_observational(20_000, 1).unwrap();
        let mut c: Vec<f64> = obs.block(0).column(0).to_vec();
        c.sort_by(f64::total_cmp);
        assert!((quantile_sorted(&c, 0.75) - 0.6745).abs() < 0.03);
    }

    #[test]
    fn toeplitz_noise() {
        let spec = build_benchmark(Benchmark::Chain, &BenchmarkParams::default()).unwrap();
        let c = spec.noise_cov(3);
        assert_eq!(c[[0, 2]], 0.25);
        assert_eq!(c[[4, 4]], 1.0);
    }
}
