use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{alpha_sigma, clip_scores, dsm_minibatch_loss, net_input, ConditionalScore, DiffusionError, DiffusionSchedule, NormStats};
use crate::dag::Dag;
use crate::nn::{AdamState, MlpParams, ShapeError};
use crate::rng::StreamKey;
use crate::scm::Dataset;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("data shape error: {0}")]
    DataShape(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("node {0} has no trained score network")]
    Untrained(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Schedule(#[from] DiffusionError),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Per-example loss weight w(t).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// w = 1: plain noise matching.
    #[default]
    Unweighted,
    /// w = 1/σ_t²: the exact score-matching weight.
    InverseVariance,
}

impl Weighting {
    #[inline]
    pub fn weight(self, t: f64) -> f64 {
        match self {
            Weighting::Unweighted => 1.0,
            Weighting::InverseVariance => {
                let (_, s) = alpha_sigma(t);
                1.0 / (s * s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden layer widths of every score network.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate to `lr · lr_final_frac`.
    pub lr_final_frac: f64,
    /// Epochs are raised so every network takes at least this many steps.
    pub min_steps: usize,
    pub weighting: Weighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            lr_final_frac: 0.1,
            min_steps: 3000,
            weighting: Weighting::Unweighted,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || self.hidden.contains(&0) || !(self.lr > 0.0) {
            return Err(ModelError::DataShape(
                "batch_size, hidden widths and lr must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lr_final_frac) {
            return Err(ModelError::DataShape("lr_final_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn epochs_for(&self, n: usize) -> (usize, usize) {
        let per_epoch = n.div_ceil(self.batch_size);
        let epochs = self.epochs.max(self.min_steps.div_ceil(per_epoch)).max(1);
        (epochs, per_epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub n_train: usize,
    pub config: TrainConfig,
    /// Mean training loss per epoch, per node (empty for untrained nodes).
    pub loss_curves: Vec<Vec<f64>>,
}

/// Trained per-node score networks with their schedule and normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRecord", into = "ModelRecord")]
pub struct CedmModel {
    dag: Dag,
    schedule: DiffusionSchedule,
    nets: Vec<Option<MlpParams>>,
    norm: NormStats,
    meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    dag: Dag,
    schedule: DiffusionSchedule,
    nets: Vec<Option<MlpParams>>,
    norm: NormStats,
    meta: TrainMeta,
}

impl From<CedmModel> for ModelRecord {
    fn from(m: CedmModel) -> Self {
        ModelRecord { dag: m.dag, schedule: m.schedule, nets: m.nets, norm: m.norm, meta: m.meta }
    }
}

impl TryFrom<ModelRecord> for CedmModel {
    type Error = ModelError;

    fn try_from(r: ModelRecord) -> Result<Self, ModelError> {
        CedmModel::from_parts(r.dag, r.schedule, r.nets, r.norm, r.meta)
    }
}

impl CedmModel {
    pub fn from_parts(
        dag: Dag,
        schedule: DiffusionSchedule,
        nets: Vec<Option<MlpParams>>,
        norm: NormStats,
        meta: TrainMeta,
    ) -> Result<Self, ModelError> {
        schedule.validate()?;
        if nets.len() != dag.num_nodes() {
            return Err(ModelError::ModelMismatch(format!("{} networks for {} nodes", nets.len(), dag.num_nodes())));
        }
        for (j, net) in nets.iter().enumerate() {
            if let Some(net) = net {
                let want = dag.dim(j) + dag.parent_dim(j) + 3;
                if net.input_dim() != want || net.output_dim() != dag.dim(j) {
                    return Err(ModelError::ModelMismatch(format!(
                        "network of {} must map {want} inputs to {} outputs",
                        dag.label(j),
                        dag.dim(j)
                    )));
                }
            }
        }
        if norm.width() != dag.total_dim() || norm.std.len() != norm.width() || norm.std.iter().any(|s| !(*s > 0.0)) {
            return Err(ModelError::ModelMismatch("normalisation statistics do not match the graph".into()));
        }
        Ok(Self { dag, schedule, nets, norm, meta })
    }

    /// Trains every node's network.
    pub fn train(
        data: &Dataset,
        dag: &Dag,
        schedule: DiffusionSchedule,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let all: Vec<usize> = (0..dag.num_nodes()).collect();
        Self::train_nodes(data, dag, schedule, config, seed, &all)
    }

    /// Trains only the listed nodes; the rest stay untrained and cannot be
    /// sampled unless intervened on.
    pub fn train_nodes(
        data: &Dataset,
        dag: &Dag,
        schedule: DiffusionSchedule,
        config: &TrainConfig,
        seed: u64,
        nodes: &[usize],
    ) -> Result<Self, ModelError> {
        schedule.validate()?;
        config.validate()?;
        if !data.matches(dag) {
            return Err(ModelError::DataShape(format!(
                "data blocks {:?} do not match graph blocks {:?} (expected columns: {})",
                data.layout().dims(),
                dag.block_dims(),
                dag.layout().column_names().join(",")
            )));
        }
        let n = data.n();
        if n < config.batch_size {
            return Err(ModelError::DataShape(format!("n = {n} is smaller than the batch size {}", config.batch_size)));
        }
        if let Some(&bad) = nodes.iter().find(|&&j| j >= dag.num_nodes()) {
            return Err(ModelError::DataShape(format!("node index {bad} out of range")));
        }
        let norm = NormStats::fit(data.values());
        let z = norm.standardize(data.values());
        let key = StreamKey::new(seed).substream("train", 0);
        let trained: Vec<(usize, MlpParams, Vec<f64>)> = nodes
            .par_iter()
            .map(|&j| {
                let xj = z.select(Axis(1), &dag.layout().columns(j).collect::<Vec<_>>());
                let pa = z.select(Axis(1), &dag.parent_columns(j));
                train_node(xj.view(), pa.view(), &schedule, config, key.substream("node", j as u64))
                    .map(|(net, curve)| (j, net, curve))
            })
            .collect::<Result<_, _>>()?;
        let mut nets = vec![None; dag.num_nodes()];
        let mut loss_curves = vec![Vec::new(); dag.num_nodes()];
        for (j, net, curve) in trained {
            nets[j] = Some(net);
            loss_curves[j] = curve;
        }
        let meta = TrainMeta { seed, n_train: n, config: config.clone(), loss_curves };
        Self::from_parts(dag.clone(), schedule, nets, norm, meta)
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn with_schedule(mut self, schedule: DiffusionSchedule) -> Result<Self, ModelError> {
        schedule.validate()?;
        self.schedule = schedule;
        Ok(self)
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn meta(&self) -> &TrainMeta {
        &self.meta
    }

    pub fn net(&self, node: usize) -> Option<&MlpParams> {
        self.nets[node].as_ref()
    }

    pub fn is_trained(&self, node: usize) -> bool {
        self.nets[node].is_some()
    }

    /// Predicted noise ε̂ for a batch.
    pub fn predict_noise(&self, node: usize, x: ArrayView2<f64>, pa: ArrayView2<f64>, t: f64) -> Result<Array2<f64>, ModelError> {
        let net = self.nets[node].as_ref().ok_or_else(|| ModelError::Untrained(self.dag.label(node).to_string()))?;
        if x.ncols() != self.dag.dim(node) || pa.ncols() != self.dag.parent_dim(node) || x.nrows() != pa.nrows() {
            return Err(ModelError::ModelMismatch(format!(
                "node {} needs x' width {} and parent width {}",
                self.dag.label(node),
                self.dag.dim(node),
                self.dag.parent_dim(node)
            )));
        }
        let ts = vec![t; x.nrows()];
        Ok(net.forward(net_input(x, pa, &ts).view())?)
    }

    /// Score −ε̂/σ_t in standardised coordinates, clipped elementwise.
    pub fn try_score(&self, node: usize, x: ArrayView2<f64>, pa: ArrayView2<f64>, t: f64) -> Result<Array2<f64>, ModelError> {
        let (_, sigma) = alpha_sigma(t);
        let eps = self.predict_noise(node, x, pa, t)?;
        Ok(clip_scores(eps.mapv(|e| -e / sigma)))
    }

    /// SHA-256 over the graph, schedule, normalisation and weights.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for l in self.dag.labels() {
            h.update(l.as_bytes());
            h.update([0u8]);
        }
        for &d in self.dag.block_dims() {
            h.update((d as u64).to_le_bytes());
        }
        for (a, b) in self.dag.edges() {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        h.update(self.schedule.t0.to_le_bytes());
        h.update(self.schedule.t_end.to_le_bytes());
        h.update((self.schedule.n_steps as u64).to_le_bytes());
        for v in self.norm.mean.iter().chain(&self.norm.std) {
            h.update(v.to_le_bytes());
        }
        for net in &self.nets {
            match net {
                None => h.update([0u8]),
                Some(net) => {
                    h.update([1u8]);
                    for &d in net.layer_dims() {
                        h.update((d as u64).to_le_bytes());
                    }
                    for blk in net.blocks() {
                        for v in blk {
                            h.update(v.to_le_bytes());
                        }
                    }
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl ConditionalScore for CedmModel {
    fn score(&self, node: usize, x: ArrayView2<f64>, pa: ArrayView2<f64>, t: f64) -> Array2<f64> {
        self.try_score(node, x, pa, t).expect("trained node with matching shapes")
    }
}

fn train_node(
    xj: ArrayView2<f64>,
    pa: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
    key: StreamKey,
) -> Result<(MlpParams, Vec<f64>), ModelError> {
    let (n, d) = xj.dim();
    let r = pa.ncols();
    let mut dims = vec![d + r + 3];
    dims.extend_from_slice(&config.hidden);
    dims.push(d);
    let mut net = MlpParams::init(&dims, key.substream("init", 0))?;
    let mut adam = AdamState::new(&net, config.lr);
    let (epochs, per_epoch) = config.epochs_for(n);
    let total = (epochs * per_epoch) as f64;
    let mut curve = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for e in 0..epochs {
        let order = key.substream("perm", e as u64).stream().permutation(n);
        let mut epoch_loss = 0.0;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let mut s = key.substream("epoch", e as u64).substream("batch", b as u64).stream();
            let t: Vec<f64> = (0..rows.len()).map(|_| s.uniform_range(schedule.t0, schedule.t_end)).collect();
            let eps = s.gaussian_matrix(rows.len(), d);
            let xb = xj.select(Axis(0), rows);
            let pb = pa.select(Axis(0), rows);
            let (loss, grads) = dsm_minibatch_loss(&net, xb.view(), pb.view(), &t, eps.view(), config.weighting, schedule)?;
            if !loss.is_finite() {
                return Err(ModelError::Numeric(format!("training loss became {loss}")));
            }
            let progress = step as f64 / total;
            let frac = config.lr_final_frac + (1.0 - config.lr_final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            adam.lr = config.lr * frac;
            adam.step(&mut net, &grads)?;
            epoch_loss += loss * rows.len() as f64;
            step += 1;
        }
        curve.push(epoch_loss / n as f64);
    }
    if !net.is_finite() {
        return Err(ModelError::Numeric("non-finite network weights after training".into()));
    }
    Ok((net, curve))
}
