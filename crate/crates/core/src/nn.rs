//! Dense ReLU networks with exact reverse-mode gradients and Adam.
//!
//! Layer `i` maps a batch `a` (rows are samples) to `a · A_iᵀ + b_i`; every
//! layer except the last is followed by ReLU.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamKey;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("shape error: {0}")]
pub struct ShapeError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord", into = "MlpRecord")]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// On-disk form: row-major weight arrays per layer.
#[derive(Serialize, Deserialize)]
struct MlpRecord {
    version: u32,
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

const MLP_FORMAT_VERSION: u32 = 1;

impl From<MlpParams> for MlpRecord {
    fn from(p: MlpParams) -> Self {
        MlpRecord {
            version: MLP_FORMAT_VERSION,
            weights: p.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: p.biases.iter().map(|b| b.to_vec()).collect(),
            layer_dims: p.layer_dims,
        }
    }
}

impl TryFrom<MlpRecord> for MlpParams {
    type Error = ShapeError;

    fn try_from(r: MlpRecord) -> Result<Self, ShapeError> {
        if r.version != MLP_FORMAT_VERSION {
            return Err(ShapeError(format!("unsupported network format version {}", r.version)));
        }
        check_dims(&r.layer_dims)?;
        let layers = r.layer_dims.len() - 1;
        if r.weights.len() != layers || r.biases.len() != layers {
            return Err(ShapeError(format!("expected {layers} weight and bias arrays")));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (i, (w, b)) in r.weights.into_iter().zip(r.biases).enumerate() {
            let (fan_in, fan_out) = (r.layer_dims[i], r.layer_dims[i + 1]);
            weights.push(
                Array2::from_shape_vec((fan_out, fan_in), w)
                    .map_err(|_| ShapeError(format!("layer {i} weight must be {fan_out}×{fan_in}")))?,
            );
            if b.len() != fan_out {
                return Err(ShapeError(format!("layer {i} bias must have length {fan_out}")));
            }
            biases.push(Array1::from(b));
        }
        let p = MlpParams { layer_dims: r.layer_dims, weights, biases };
        if !p.is_finite() {
            return Err(ShapeError("non-finite parameter".into()));
        }
        Ok(p)
    }
}

fn check_dims(dims: &[usize]) -> Result<(), ShapeError> {
    if dims.len() < 2 {
        return Err(ShapeError(format!("need at least 2 layer sizes, got {dims:?}")));
    }
    if dims.contains(&0) {
        return Err(ShapeError(format!("layer sizes must be positive, got {dims:?}")));
    }
    Ok(())
}

impl MlpParams {
    /// He-scaled Gaussian weights (std √(2 / fan_in)), zero biases.
    pub fn init(layer_dims: &[usize], key: StreamKey) -> Result<Self, ShapeError> {
        check_dims(layer_dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, pair) in layer_dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut s = key.substream("layer", i as u64).stream();
            let std = (2.0 / fan_in as f64).sqrt();
            weights.push(s.gaussian_matrix(fan_out, fan_in).mapv(|v| v * std));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self { layer_dims: layer_dims.to_vec(), weights, biases })
    }

    /// Builds a network from explicit layers; `weights[i]` is out × in.
    pub fn from_layers(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self, ShapeError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(ShapeError("need one bias per weight matrix".into()));
        }
        let mut dims = vec![weights[0].ncols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *dims.last().unwrap() || b.len() != w.nrows() {
                return Err(ShapeError(format!("layer {i} does not chain")));
            }
            dims.push(w.nrows());
        }
        check_dims(&dims)?;
        let weights = weights.into_iter().map(|w| w.as_standard_layout().into_owned()).collect();
        let biases = biases.into_iter().map(|b| b.as_standard_layout().into_owned()).collect();
        Ok(Self { layer_dims: dims, weights, biases })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Parameter blocks in a fixed order: W_1, b_1, W_2, b_2, …
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Zero-valued parameters with the same shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), ShapeError> {
        if x.ncols() != self.input_dim() {
            return Err(ShapeError(format!("input width {} but network expects {}", x.ncols(), self.input_dim())));
        }
        Ok(())
    }

    /// Batch forward pass.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, ShapeError> {
        self.check_input(&x)?;
        let last = self.weights.len() - 1;
        let mut a = affine(x, &self.weights[0], &self.biases[0]);
        for i in 1..=last {
            a.mapv_inplace(relu);
            a = affine(a.view(), &self.weights[i], &self.biases[i]);
        }
        Ok(a)
    }

    /// Loss `mean_i w_i ‖f(x_i) − y_i‖²` (w_i = 1 when `row_weights` is None)
    /// and its exact gradient.
    pub fn loss_and_grad(
        &self,
        x: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        row_weights: Option<&[f64]>,
    ) -> Result<(f64, MlpParams), ShapeError> {
        self.check_input(&x)?;
        let n = x.nrows();
        if targets.dim() != (n, self.output_dim()) {
            return Err(ShapeError(format!(
                "targets must be {n}×{}, got {:?}",
                self.output_dim(),
                targets.dim()
            )));
        }
        if row_weights.is_some_and(|w| w.len() != n) {
            return Err(ShapeError("one weight per row required".into()));
        }
        if n == 0 {
            return Err(ShapeError("empty batch".into()));
        }
        let layers = self.weights.len();
        // Pre-activations of each layer; the input is kept as a view.
        let mut pre: Vec<Array2<f64>> = Vec::with_capacity(layers);
        pre.push(affine(x, &self.weights[0], &self.biases[0]));
        for i in 1..layers {
            let h = pre[i - 1].mapv(relu);
            pre.push(affine(h.view(), &self.weights[i], &self.biases[i]));
        }
        let out = &pre[layers - 1];
        let mut delta = out - &targets;
        let mut loss = 0.0;
        for (i, mut row) in delta.rows_mut().into_iter().enumerate() {
            let w = row_weights.map_or(1.0, |w| w[i]);
            loss += w * row.iter().map(|r| r * r).sum::<f64>();
            let g = 2.0 * w / n as f64;
            row.mapv_inplace(|r| g * r);
        }
        loss /= n as f64;

        let mut grads = self.zeros_like();
        for i in (0..layers).rev() {
            let input = if i == 0 { x.to_owned() } else { pre[i - 1].mapv(relu) };
            grads.weights[i] = delta.t().dot(&input).as_standard_layout().into_owned();
            grads.biases[i] = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.weights[i]);
                ndarray::Zip::from(&mut back).and(&pre[i - 1]).for_each(|b, &z| {
                    if z <= 0.0 {
                        *b = 0.0;
                    }
                });
                delta = back;
            }
        }
        Ok((loss, grads))
    }

    /// Loss only (no gradient).
    pub fn loss(&self, x: ArrayView2<f64>, targets: ArrayView2<f64>, row_weights: Option<&[f64]>) -> Result<f64, ShapeError> {
        let out = self.forward(x)?;
        if targets.dim() != out.dim() {
            return Err(ShapeError("target shape mismatch".into()));
        }
        let n = out.nrows() as f64;
        let mut loss = 0.0;
        for (i, (o, t)) in out.rows().into_iter().zip(targets.rows()).enumerate() {
            let w = row_weights.map_or(1.0, |w| w[i]);
            loss += w * o.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(loss / n)
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 { v } else { 0.0 }
}

fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    out += b;
    out
}

/// Adam optimiser state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams) -> Result<(), ShapeError> {
        if params.layer_dims != grads.layer_dims || params.layer_dims.len() - 1 != self.m.len() / 2 {
            return Err(ShapeError("parameter, gradient and optimiser shapes differ".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.blocks_mut().into_iter().zip(grads.blocks()).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Largest relative error |a − n| / max(|a|, |n|, 1e-6) between analytic and
/// central-difference gradients over `coords` random parameter coordinates
/// (all of them if the network is smaller). With tiny `h` the result is
/// dominated by round-off but is still returned.
pub fn finite_diff_check(
    params: &MlpParams,
    x: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    h: f64,
    coords: usize,
    key: StreamKey,
) -> Result<f64, ShapeError> {
    let (_, grads) = params.loss_and_grad(x, targets, None)?;
    let sizes: Vec<usize> = params.blocks().iter().map(|b| b.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if coords >= total {
        (0..total).collect()
    } else {
        let mut s = key.stream();
        s.permutation(total)[..coords].to_vec()
    };
    let locate = |mut flat: usize| {
        for (b, &len) in sizes.iter().enumerate() {
            if flat < len {
                return (b, flat);
            }
            flat -= len;
        }
        unreachable!()
    };
    let gblocks = grads.blocks();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for flat in picks {
        let (b, k) = locate(flat);
        let orig = params.blocks()[b][k];
        probe.blocks_mut()[b][k] = orig + h;
        let up = probe.loss(x, targets, None)?;
        probe.blocks_mut()[b][k] = orig - h;
        let down = probe.loss(x, targets, None)?;
        probe.blocks_mut()[b][k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = gblocks[b][k];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}
