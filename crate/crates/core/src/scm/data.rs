use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::ScmError;
use crate::dag::{BlockLayout, Dag};

/// Hard intervention do(X_S = x*_S).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    targets: Vec<usize>,
    values: Vec<Vec<f64>>,
}

impl Intervention {
    pub fn new(dag: &Dag, targets: Vec<usize>, values: Vec<Vec<f64>>) -> Result<Self, ScmError> {
        if targets.len() != values.len() {
            return Err(ScmError::Dimension(format!(
                "{} targets but {} value vectors",
                targets.len(),
                values.len()
            )));
        }
        let mut seen = vec![false; dag.num_nodes()];
        for (&t, v) in targets.iter().zip(&values) {
            if t >= dag.num_nodes() {
                return Err(ScmError::Dimension(format!("intervention target {t} out of range")));
            }
            if std::mem::replace(&mut seen[t], true) {
                return Err(ScmError::Dimension(format!("node {} intervened twice", dag.label(t))));
            }
            if v.len() != dag.dim(t) {
                return Err(ScmError::Dimension(format!(
                    "node {} has dimension {} but {} values were given",
                    dag.label(t),
                    dag.dim(t),
                    v.len()
                )));
            }
        }
        Ok(Self { targets, values })
    }

    /// do(∅).
    pub fn empty() -> Self {
        Self { targets: Vec::new(), values: Vec::new() }
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn value_of(&self, node: usize) -> Option<&[f64]> {
        self.targets
            .iter()
            .position(|&t| t == node)
            .map(|i| self.values[i].as_slice())
    }

    /// Concatenated target values in target order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Observational,
    /// Oracle interventional draw; targets by label.
    Interventional { targets: Vec<String>, values: Vec<Vec<f64>> },
    SyntheticCedm { targets: Vec<String>, values: Vec<Vec<f64>> },
    /// Loaded from an external file.
    External,
}

impl Provenance {
    pub fn interventional(dag: &Dag, iv: &Intervention) -> Self {
        Self::Interventional {
            targets: iv.targets().iter().map(|&t| dag.label(t).to_string()).collect(),
            values: iv.values().to_vec(),
        }
    }

    pub fn synthetic(dag: &Dag, iv: &Intervention) -> Self {
        Self::SyntheticCedm {
            targets: iv.targets().iter().map(|&t| dag.label(t).to_string()).collect(),
            values: iv.values().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: Option<u64>,
    pub provenance: Provenance,
}

/// n × d sample matrix whose columns are grouped by block in node-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Array2<f64>,
    layout: BlockLayout,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(values: Array2<f64>, layout: BlockLayout, meta: DatasetMeta) -> Result<Self, ScmError> {
        if values.ncols() != layout.width() {
            return Err(ScmError::Dimension(format!(
                "data has {} columns, layout {:?} needs {}",
                values.ncols(),
                layout.dims(),
                layout.width()
            )));
        }
        if values.nrows() == 0 {
            return Err(ScmError::Dimension("dataset has no rows".into()));
        }
        Ok(Self { values, layout, meta })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Columns of one block.
    pub fn block(&self, node: usize) -> ArrayView2<'_, f64> {
        self.values.slice(ndarray::s![.., self.layout.columns(node)])
    }

    /// Columns of several blocks concatenated (copy).
    pub fn blocks(&self, nodes: &[usize]) -> Array2<f64> {
        let cols = self.layout.gather_columns(nodes);
        self.values.select(Axis(1), &cols)
    }

    /// Row subset (copy) with the same layout and metadata.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            values: self.values.select(Axis(0), rows),
            layout: self.layout.clone(),
            meta: self.meta.clone(),
        }
    }

    /// True when the block layout matches the graph's.
    pub fn matches(&self, dag: &Dag) -> bool {
        self.layout.dims() == dag.block_dims()
    }
}
