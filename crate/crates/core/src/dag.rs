//! Directed acyclic graphs over vector-valued nodes ("blocks").
//!
//! Nodes are addressed by zero-based index internally. Every graph carries a
//! label per node; when none are supplied the labels default to `X1..Xp`.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DagError {
    #[error("graph has no nodes")]
    Empty,
    #[error("node {node} has dimension 0")]
    ZeroDimension { node: usize },
    #[error("edge ({from}, {to}) references a node outside 0..{p}")]
    IndexOutOfRange { from: usize, to: usize, p: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("directed cycle: {}", fmt_cycle(.0))]
    Cycle(Vec<usize>),
    #[error("edge ({0}, {1}) is not in the graph")]
    MissingEdge(usize, usize),
    #[error("expected {expected} labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("duplicate node label {0:?}")]
    DuplicateLabel(String),
    #[error("unknown node label {0:?}")]
    UnknownLabel(String),
}

fn fmt_cycle(c: &[usize]) -> String {
    c.iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(" -> ")
}

/// Column layout of a block-structured data matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    labels: Vec<String>,
}

impl BlockLayout {
    pub fn new(dims: Vec<usize>, labels: Vec<String>) -> Self {
        assert_eq!(dims.len(), labels.len());
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for d in &dims {
            offsets.push(acc);
            acc += d;
        }
        Self { dims, offsets, labels }
    }

    pub fn num_blocks(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, node: usize) -> usize {
        self.dims[node]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> &str {
        &self.labels[node]
    }

    /// Total column count.
    pub fn width(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn columns(&self, node: usize) -> Range<usize> {
        self.offsets[node]..self.offsets[node] + self.dims[node]
    }

    /// Column indices of several blocks concatenated in the given order.
    pub fn gather_columns(&self, nodes: &[usize]) -> Vec<usize> {
        nodes.iter().flat_map(|&n| self.columns(n)).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Header names: `label` for unit blocks, `label[k]` (1-based) otherwise.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width());
        for (label, &d) in self.labels.iter().zip(&self.dims) {
            if d == 1 {
                names.push(label.clone());
            } else {
                names.extend((1..=d).map(|k| format!("{label}[{k}]")));
            }
        }
        names
    }
}

/// A validated DAG with per-node block dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    layout: BlockLayout,
    edges: BTreeSet<(usize, usize)>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

impl Dag {
    /// Validates the edge list and computes a deterministic topological order
    /// (Kahn's algorithm, smallest ready index first).
    pub fn new(block_dims: Vec<usize>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, DagError> {
        let labels = (1..=block_dims.len()).map(|i| format!("X{i}")).collect();
        Self::with_labels(block_dims, labels, edges)
    }

    pub fn with_labels(
        block_dims: Vec<usize>,
        labels: Vec<String>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, DagError> {
        let p = block_dims.len();
        if p == 0 {
            return Err(DagError::Empty);
        }
        if let Some(node) = block_dims.iter().position(|&d| d == 0) {
            return Err(DagError::ZeroDimension { node });
        }
        if labels.len() != p {
            return Err(DagError::LabelCount { expected: p, got: labels.len() });
        }
        let mut seen = BTreeSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(DagError::DuplicateLabel(l.clone()));
            }
        }
        let mut edge_set = BTreeSet::new();
        for (from, to) in edges {
            if from >= p || to >= p {
                return Err(DagError::IndexOutOfRange { from, to, p });
            }
            if from == to {
                return Err(DagError::SelfLoop(from));
            }
            edge_set.insert((from, to));
        }
        let mut parents = vec![Vec::new(); p];
        let mut children = vec![Vec::new(); p];
        for &(k, j) in &edge_set {
            parents[j].push(k);
            children[k].push(j);
        }
        let topo = kahn(&parents, &children).map_err(DagError::Cycle)?;
        Ok(Self {
            layout: BlockLayout::new(block_dims, labels),
            edges: edge_set,
            parents,
            children,
            topo,
        })
    }

    /// Same as [`Dag::with_labels`] but with edges given by label.
    pub fn from_labelled_edges(
        block_dims: Vec<usize>,
        labels: Vec<String>,
        edges: &[(&str, &str)],
    ) -> Result<Self, DagError> {
        let find = |l: &str| {
            labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| DagError::UnknownLabel(l.to_string()))
        };
        let idx = edges
            .iter()
            .map(|(a, b)| Ok((find(a)?, find(b)?)))
            .collect::<Result<Vec<_>, DagError>>()?;
        Self::with_labels(block_dims, labels, idx)
    }

    pub fn num_nodes(&self) -> usize {
        self.layout.num_blocks()
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn block_dims(&self) -> &[usize] {
        self.layout.dims()
    }

    pub fn dim(&self, node: usize) -> usize {
        self.layout.dim(node)
    }

    pub fn labels(&self) -> &[String] {
        self.layout.labels()
    }

    pub fn label(&self, node: usize) -> &str {
        self.layout.label(node)
    }

    pub fn index_of(&self, label: &str) -> Result<usize, DagError> {
        self.layout
            .index_of(label)
            .ok_or_else(|| DagError::UnknownLabel(label.to_string()))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    /// Parents in ascending index order.
    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn is_root(&self, node: usize) -> bool {
        self.parents[node].is_empty()
    }

    /// Total parent dimension r_j.
    pub fn parent_dim(&self, node: usize) -> usize {
        self.parents[node].iter().map(|&k| self.dim(k)).sum()
    }

    /// Maximum local dimension max_j (d_j + r_j).
    pub fn max_local_dim(&self) -> usize {
        (0..self.num_nodes())
            .map(|j| self.dim(j) + self.parent_dim(j))
            .max()
            .unwrap_or(0)
    }

    pub fn total_dim(&self) -> usize {
        self.layout.width()
    }

    /// Column indices of the node's parents, concatenated in parent order.
    pub fn parent_columns(&self, node: usize) -> Vec<usize> {
        self.layout.gather_columns(&self.parents[node])
    }

    /// New graph without the edges in `remove`; the receiver is unchanged.
    pub fn delete_edges(&self, remove: &[(usize, usize)]) -> Result<Self, DagError> {
        for &(k, j) in remove {
            if !self.edges.contains(&(k, j)) {
                return Err(DagError::MissingEdge(k, j));
            }
        }
        let kept = self.edges.iter().copied().filter(|e| !remove.contains(e));
        Self::with_labels(self.layout.dims.clone(), self.layout.labels.clone(), kept)
    }

    /// New graph with extra edges added (duplicates ignored).
    pub fn add_edges(&self, extra: &[(usize, usize)]) -> Result<Self, DagError> {
        let all = self.edges.iter().copied().chain(extra.iter().copied());
        Self::with_labels(self.layout.dims.clone(), self.layout.labels.clone(), all)
    }

    /// Transitive closure of parents, excluding the node itself.
    pub fn ancestors(&self, node: usize) -> BTreeSet<usize> {
        closure(node, &self.parents)
    }

    pub fn descendants(&self, node: usize) -> BTreeSet<usize> {
        closure(node, &self.children)
    }
}

fn closure(start: usize, adj: &[Vec<usize>]) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<usize> = adj[start].clone();
    while let Some(v) = stack.pop() {
        if out.insert(v) {
            stack.extend(adj[v].iter().copied());
        }
    }
    out
}

fn kahn(parents: &[Vec<usize>], children: &[Vec<usize>]) -> Result<Vec<usize>, Vec<usize>> {
    let p = parents.len();
    let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..p).filter(|&v| indeg[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(p);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &c in &children[v] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() == p {
        return Ok(order);
    }
    // Every leftover node has a leftover parent; walk parents until a repeat.
    let start = (0..p).find(|&v| indeg[v] > 0).expect("leftover node");
    let mut pos = vec![usize::MAX; p];
    let mut path = Vec::new();
    let mut v = start;
    while pos[v] == usize::MAX {
        pos[v] = path.len();
        path.push(v);
        v = *parents[v]
            .iter()
            .find(|&&u| indeg[u] > 0)
            .expect("leftover node has a leftover parent");
    }
    let mut cycle: Vec<usize> = path[pos[v]..].to_vec();
    cycle.reverse();
    cycle.push(cycle[0]);
    Err(cycle)
}

/// Serialisable edge-list form used by file formats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagRecord {
    pub labels: Vec<String>,
    pub dims: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

impl From<&Dag> for DagRecord {
    fn from(d: &Dag) -> Self {
        Self {
            labels: d.labels().to_vec(),
            dims: d.block_dims().to_vec(),
            edges: d.edges().collect(),
        }
    }
}

impl TryFrom<DagRecord> for Dag {
    type Error = DagError;

    fn try_from(r: DagRecord) -> Result<Self, DagError> {
        Dag::with_labels(r.dims, r.labels, r.edges)
    }
}

impl Serialize for Dag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        DagRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Dag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = DagRecord::deserialize(d)?;
        Dag::try_from(r).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain3() -> Dag {
        Dag::new(vec![1, 1, 1], [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn chain_order_and_parents() {
        let g = chain3();
        assert_eq!(g.topo_order(), &[0, 1, 2]);
        assert_eq!(g.parents(2), &[1]);
        assert_eq!(g.max_local_dim(), 2);
    }

    #[test]
    fn two_cycle_rejected() {
        let err = Dag::new(vec![1, 1], [(0, 1), (1, 0)]).unwrap_err();
        match err {
            DagError::Cycle(c) => {
                assert_eq!(c.first(), c.last());
                assert_eq!(c.len(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn longer_cycle_reported() {
        let err = Dag::new(vec![1; 4], [(0, 1), (1, 2), (2, 3), (3, 1)]).unwrap_err();
        let DagError::Cycle(c) = err else { panic!() };
        let mut members: Vec<usize> = c[..c.len() - 1].to_vec();
        members.sort_unstable();
        assert_eq!(members, vec![1, 2, 3]);
        for w in c.windows(2) {
            assert!([(1, 2), (2, 3), (3, 1)].contains(&(w[0], w[1])), "{c:?}");
        }
    }

    #[test]
    fn bad_inputs() {
        assert_eq!(Dag::new(vec![1, 1], [(0, 2)]).unwrap_err(), DagError::IndexOutOfRange { from: 0, to: 2, p: 2 });
        assert_eq!(Dag::new(vec![1, 1], [(1, 1)]).unwrap_err(), DagError::SelfLoop(1));
        assert_eq!(Dag::new(vec![], []).unwrap_err(), DagError::Empty);
        assert_eq!(Dag::new(vec![2, 0], []).unwrap_err(), DagError::ZeroDimension { node: 1 });
    }

    #[test]
    fn ties_broken_by_smallest_index() {
        let g = Dag::new(vec![1; 4], [(3, 0), (2, 0)]).unwrap();
        assert_eq!(g.topo_order(), &[1, 2, 3, 0]);
    }

    #[test]
    fn delete_edges_on_chain() {
        let g = chain3();
        let h = g.delete_edges(&[(1, 2)]).unwrap();
        assert_eq!(h.edges().collect::<Vec<_>>(), vec![(0, 1)]);
        assert!(h.parents(2).is_empty());
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.delete_edges(&[(0, 2)]).unwrap_err(), DagError::MissingEdge(0, 2));
    }

    #[test]
    fn ancestors_basic() {
        let g = chain3();
        assert_eq!(g.ancestors(2).into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert!(g.ancestors(0).is_empty());
        let hub = Dag::new(vec![5; 6], (1..6).map(|k| (0, k))).unwrap();
        assert_eq!(hub.ancestors(3).into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn layout_columns() {
        let g = Dag::new(vec![2, 3, 1], [(0, 2), (1, 2)]).unwrap();
        assert_eq!(g.layout().columns(1), 2..5);
        assert_eq!(g.parent_columns(2), vec![0, 1, 2, 3, 4]);
        assert_eq!(g.parent_dim(2), 5);
        assert_eq!(
            g.layout().column_names(),
            vec!["X1[1]", "X1[2]", "X2[1]", "X2[2]", "X2[3]", "X3"]
        );
    }

    #[test]
    fn serde_round_trip() {
        let g = Dag::new(vec![2, 3, 1], [(0, 2), (1, 2)]).unwrap();
        let rec = DagRecord::from(&g);
        assert_eq!(Dag::try_from(rec).unwrap(), g);
    }

    /// Random DAG: edges only from lower to higher position of a random permutation.
    fn random_dag() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2usize..12).prop_flat_map(|p| {
            let pairs: Vec<(usize, usize)> =
                (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).collect();
            let n = pairs.len();
            (
                Just(p),
                Just(pairs),
                proptest::collection::vec(any::<bool>(), n),
                Just(()).prop_perturb(move |_, mut rng| {
                    let mut perm: Vec<usize> = (0..p).collect();
                    for i in (1..p).rev() {
                        let j = (rng.next_u32() as usize) % (i + 1);
                        perm.swap(i, j);
                    }
                    perm
                }),
            )
                .prop_map(|(p, pairs, keep, perm)| {
                    let edges = pairs
                        .into_iter()
                        .zip(keep)
                        .filter(|(_, k)| *k)
                        .map(|((i, j), _)| (perm[i], perm[j]))
                        .collect();
                    (p, edges)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn topo_order_respects_parents((p, edges) in random_dag()) {
            let g = Dag::new(vec![1; p], edges).expect("acyclic by construction");
            let mut pos = vec![0; p];
            for (l, &v) in g.topo_order().iter().enumerate() {
                pos[v] = l;
            }
            for j in 0..p {
                for &k in g.parents(j) {
                    prop_assert!(pos[k] < pos[j]);
                }
            }
            let mut sorted = g.topo_order().to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..p).collect::<Vec<_>>());
        }

        #[test]
        fn delete_commutes((p, edges) in random_dag(), split in 0usize..100) {
            prop_assume!(edges.len() >= 2);
            let g = Dag::new(vec![1; p], edges.clone()).unwrap();
            let cut = 1 + split % (edges.len() - 1);
            let (h1, h2) = edges.split_at(cut);
            let a = g.delete_edges(h1).unwrap().delete_edges(h2).unwrap();
            let b = g.delete_edges(h2).unwrap().delete_edges(h1).unwrap();
            let c = g.delete_edges(&edges).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&a, &c);
        }
    }
}
