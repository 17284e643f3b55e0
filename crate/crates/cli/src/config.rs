//! Experiment configuration: a sectioned TOML document in which every field
//! has a default, and the graph file format.

use std::path::{Path, PathBuf};

use cedm_core::dag::Dag;
use cedm_core::diffusion::{DiffusionSchedule, TrainConfig};
use cedm_core::inference::{CedmiConfig, Correction};
use cedm_core::scm::{build_benchmark, Benchmark, BenchmarkParams, ScmSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; `--seed` overrides it.
    pub seed: u64,
    pub graph: GraphConfig,
    pub schedule: DiffusionSchedule,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub evaluation: EvaluationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub benchmark: Benchmark,
    /// Rows simulated by `simulate`.
    pub n: usize,
    /// User graph; replaces the benchmark graph for train and test-edge.
    pub file: Option<PathBuf>,
    pub params: BenchmarkParams,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { benchmark: Benchmark::Chain, n: 1000, file: None, params: BenchmarkParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub n1: usize,
    pub n2: usize,
    pub m_mc: usize,
    pub correction: Correction,
    /// Disable to fit and test on the same rows.
    pub split: bool,
    pub mmd_perm: usize,
    pub alpha: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { n1: 500, n2: 300, m_mc: 100, correction: Correction::Holm, split: true, mmd_perm: 199, alpha: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub graphs: Vec<Benchmark>,
    pub sizes: Vec<usize>,
    pub reps: usize,
    /// Rows in the oracle reference sample and in the model sample.
    pub reference_size: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { graphs: vec![Benchmark::Chain], sizes: vec![500, 2000], reps: 10, reference_size: 5000 }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Canonical TOML form.
    pub fn emit(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.schedule.validate().map_err(|e| CliError::Usage(format!("config [schedule]: {e}")))?;
        self.train.validate().map_err(|e| CliError::Usage(format!("config [train]: {e}")))?;
        let inf = &self.inference;
        if inf.n1 == 0 || inf.n2 == 0 || inf.m_mc == 0 {
            return Err(CliError::Usage("config [inference]: n1, n2 and m_mc must be positive".into()));
        }
        if !(inf.alpha > 0.0 && inf.alpha < 1.0) {
            return Err(CliError::Usage(format!("config [inference]: alpha {} outside (0, 1)", inf.alpha)));
        }
        if inf.mmd_perm != 0 && inf.mmd_perm < 19 {
            return Err(CliError::Usage("config [inference]: mmd_perm must be 0 or at least 19".into()));
        }
        Ok(())
    }

    pub fn scm(&self) -> Result<ScmSpec, CliError> {
        Ok(build_benchmark(self.graph.benchmark, &self.graph.params)?)
    }

    /// Graph for training and testing: the user file when given, else the
    /// benchmark's.
    pub fn dag(&self) -> Result<Dag, CliError> {
        match &self.graph.file {
            Some(p) => load_graph(p),
            None => Ok(self.scm()?.dag().clone()),
        }
    }

    pub fn cedmi(&self) -> CedmiConfig {
        CedmiConfig {
            schedule: self.schedule,
            train: self.train.clone(),
            n1: self.inference.n1,
            m_mc: self.inference.m_mc,
            split: self.inference.split,
            mmd_perm: self.inference.mmd_perm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub nodes: Vec<NodeEntry>,
    #[serde(default)]
    pub edges: Vec<[String; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub label: String,
    #[serde(default = "one")]
    pub dim: usize,
}

fn one() -> usize {
    1
}

impl GraphFile {
    pub fn from_dag(dag: &Dag) -> Self {
        Self {
            nodes: (0..dag.num_nodes()).map(|j| NodeEntry { label: dag.label(j).into(), dim: dag.dim(j) }).collect(),
            edges: dag.edges().map(|(a, b)| [dag.label(a).to_string(), dag.label(b).to_string()]).collect(),
        }
    }

    pub fn to_dag(&self) -> Result<Dag, CliError> {
        let dims = self.nodes.iter().map(|n| n.dim).collect();
        let labels = self.nodes.iter().map(|n| n.label.clone()).collect();
        let edges: Vec<(&str, &str)> = self.edges.iter().map(|[a, b]| (a.as_str(), b.as_str())).collect();
        Ok(Dag::from_labelled_edges(dims, labels, &edges)?)
    }
}

/// Graph document: `[[nodes]]` tables with `label` and `dim`, and
/// `edges = [["from", "to"], ...]`.
pub fn load_graph(path: &Path) -> Result<Dag, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let gf: GraphFile = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    gf.to_dag().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
