//! Dense feed-forward network with segmented execution at any cut point.
//!
//! Training math is 64-bit throughout; the wire format (see [`crate::proto`])
//! casts to 32-bit. Splitting is exact by construction: the monolithic
//! forward/backward and the client/server composition perform the identical
//! sequence of operations, so logits and gradients agree bit for bit.

mod catalog;
mod findiff;
mod linalg;

pub use catalog::{catalog_cuts, catalog_with_overrides, SplitCatalog, SplitEntry};
pub use findiff::{
    fd_param_grads, finite_diff_check, finite_diff_check_with, FiniteDiffReport, GradCorruption,
};

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{scope, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Layer-list architecture. The final layer feeds a softmax cross-entropy
/// head and stays linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Affine chain through `dims`, ReLU on every layer except the last.
    pub fn chain(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Shape("zero-width layer".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                in_dim: dims[i],
                out_dim: dims[i + 1],
                activation: if i + 1 == n { Activation::Linear } else { Activation::Relu },
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "dimension chain break between layers {} and {} ({} vs {})",
                    i,
                    i + 1,
                    pair[0].out_dim,
                    pair[1].in_dim
                )));
            }
        }
        if self.layers.iter().any(|l| l.in_dim == 0 || l.out_dim == 0) {
            return Err(Error::Shape("zero-width layer".into()));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Multiply-accumulate count per layer; the cost model for cut placement.
    pub fn mac_counts(&self) -> Vec<u64> {
        self.layers
            .iter()
            .map(|l| (l.in_dim as u64) * (l.out_dim as u64))
            .collect()
    }
}

/// Default 6-layer architecture: a narrow first layer keeps the shallowest
/// cut cheap, wider middle layers carry capacity.
pub fn default_network_spec(input_dim: usize, n_classes: usize) -> NetworkSpec {
    NetworkSpec::chain(&[input_dim, 8, 64, 64, 64, 32, n_classes]).expect("static dims chain")
}

/// Parameters plus AdamW state for one layer. Weights are `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub m_w: Array2<f64>,
    pub v_w: Array2<f64>,
    pub m_b: Array1<f64>,
    pub v_b: Array1<f64>,
    pub step: u64,
}

impl LayerState {
    fn zeros_like_spec(spec: &LayerSpec) -> Self {
        Self {
            w: Array2::zeros((spec.in_dim, spec.out_dim)),
            b: Array1::zeros(spec.out_dim),
            m_w: Array2::zeros((spec.in_dim, spec.out_dim)),
            v_w: Array2::zeros((spec.in_dim, spec.out_dim)),
            m_b: Array1::zeros(spec.out_dim),
            v_b: Array1::zeros(spec.out_dim),
            step: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.m_w.iter().all(|v| v.is_finite())
            && self.v_w.iter().all(|v| v.is_finite())
            && self.m_b.iter().all(|v| v.is_finite())
            && self.v_b.iter().all(|v| v.is_finite())
    }
}

/// Gradients for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LayerGrads {
    pub fn norm_sq(&self) -> f64 {
        self.w.iter().map(|g| g * g).sum::<f64>() + self.b.iter().map(|g| g * g).sum::<f64>()
    }
}

/// Canonical parameter store: per-layer weights, biases and optimizer
/// moments. The server owns the authoritative copy; clients pull segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    spec: NetworkSpec,
    layers: Vec<LayerState>,
}

/// Kaiming-style fan-in scaled Gaussian init: weights `N(0, 2/fan_in)`,
/// biases and moments zero. Deterministic under `seed`.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.depth());
    for (i, layer_spec) in spec.layers.iter().enumerate() {
        let mut layer = LayerState::zeros_like_spec(layer_spec);
        let std = (2.0 / layer_spec.in_dim as f64).sqrt();
        let mut rng = stream(seed, &[scope::NET_INIT, i as u64]);
        for w in layer.w.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *w = std * z;
        }
        layers.push(layer);
    }
    Ok(ParamStore {
        spec: spec.clone(),
        layers,
    })
}

impl ParamStore {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerState] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.spec
            .layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum()
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if !layer.is_finite() {
                return Err(Error::NonFinite(format!("parameter store layer {i}")));
            }
        }
        Ok(())
    }

    /// Snapshot of the first `cut_layer` layers, the segment a client pulls.
    pub fn client_segment(&self, cut_layer: usize) -> Result<SegmentState> {
        if cut_layer == 0 || cut_layer >= self.spec.depth() {
            return Err(Error::Shape(format!(
                "cut at layer {cut_layer} outside (0, {})",
                self.spec.depth()
            )));
        }
        Ok(SegmentState {
            base: 0,
            layers: self.layers[..cut_layer].to_vec(),
        })
    }

    /// Monolithic forward pass to logits; the reference path for split
    /// equivalence and the evaluation path for metrics.
    pub fn forward_full(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        let trace = forward_segment(&self.spec.layers, &self.layers, batch)?;
        Ok(trace.output)
    }

    /// Server half of a split step: complete the forward pass from the cut,
    /// compute loss/accuracy, backpropagate to the cut, and apply one AdamW
    /// update to the server segment. The returned gradient is taken before
    /// the update, as in an ordinary backward pass.
    pub fn forward_server_and_loss(
        &mut self,
        cut_layer: usize,
        smashed: &SmashedBatch,
        hyper: &AdamWHyper,
    ) -> Result<GradAtCut> {
        let depth = self.spec.depth();
        if cut_layer == 0 || cut_layer >= depth {
            return Err(Error::Shape(format!("cut at layer {cut_layer} outside (0, {depth})")));
        }
        let expected = self.spec.layers[cut_layer - 1].out_dim;
        if smashed.activations.ncols() != expected {
            return Err(Error::Shape(format!(
                "smashed width {} does not match cut width {expected} (round {}, device {})",
                smashed.activations.ncols(),
                smashed.round,
                smashed.device_id
            )));
        }
        if smashed.activations.nrows() == 0 {
            return Err(Error::Shape("empty smashed batch".into()));
        }
        if smashed.activations.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "smashed activations (round {}, device {})",
                smashed.round, smashed.device_id
            )));
        }
        if smashed.labels.len() != smashed.activations.nrows() {
            return Err(Error::Shape("smashed labels do not match batch".into()));
        }

        let spec = &self.spec.layers[cut_layer..];
        let trace = forward_segment(spec, &self.layers[cut_layer..], &smashed.activations)?;
        let loss_out = softmax_xent(&trace.output, &smashed.labels)?;
        let (grads, grad_at_cut) =
            backward_segment(spec, &self.layers[cut_layer..], &trace, &loss_out.dlogits);
        adamw_step(&mut self.layers[cut_layer..], &grads, hyper)?;

        Ok(GradAtCut {
            round: smashed.round,
            device_id: smashed.device_id,
            split: smashed.split,
            grad: grad_at_cut,
            loss: loss_out.loss,
            batch_accuracy: loss_out.accuracy,
        })
    }

    /// One monolithic training step (forward, loss, backward, AdamW on every
    /// layer). Used by the centralized baseline.
    pub fn train_full_batch(
        &mut self,
        batch: &Array2<f64>,
        labels: &[usize],
        hyper: &AdamWHyper,
    ) -> Result<(f64, f64)> {
        let trace = forward_segment(&self.spec.layers, &self.layers, batch)?;
        let loss_out = softmax_xent(&trace.output, labels)?;
        let (grads, _) =
            backward_segment(&self.spec.layers, &self.layers, &trace, &loss_out.dlogits);
        adamw_step(&mut self.layers, &grads, hyper)?;
        Ok((loss_out.loss, loss_out.accuracy))
    }

    /// Class predictions by logit argmax (lowest index wins ties).
    pub fn predict(&self, batch: &Array2<f64>) -> Result<Vec<usize>> {
        let logits = self.forward_full(batch)?;
        Ok(argmax_rows(&logits))
    }
}

/// A contiguous run of layers starting at `base`, with optimizer state.
/// Client segments always start at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentState {
    pub base: usize,
    pub layers: Vec<LayerState>,
}

/// Cut-layer activations shipped client to server, with the labels the
/// server needs for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedBatch {
    pub round: u32,
    pub device_id: u16,
    /// Split index, 1-based.
    pub split: u8,
    pub activations: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Loss gradient at the cut, shipped server to client, plus the scalar loss
/// and batch accuracy the reward needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAtCut {
    pub round: u32,
    pub device_id: u16,
    pub split: u8,
    pub grad: Array2<f64>,
    pub loss: f64,
    pub batch_accuracy: f64,
}

/// Forward activations cached between a client forward and its backward.
#[derive(Debug, Clone)]
pub struct SegmentTrace {
    layer_inputs: Vec<Array2<f64>>,
    preacts: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Run `layers` over `input`, keeping per-layer inputs and pre-activations
/// for the backward pass.
pub fn forward_segment(
    spec: &[LayerSpec],
    layers: &[LayerState],
    input: &Array2<f64>,
) -> Result<SegmentTrace> {
    if spec.len() != layers.len() || spec.is_empty() {
        return Err(Error::Shape("segment spec/state length mismatch".into()));
    }
    if input.ncols() != spec[0].in_dim {
        return Err(Error::Shape(format!(
            "input width {} does not match layer input {}",
            input.ncols(),
            spec[0].in_dim
        )));
    }
    let mut layer_inputs = Vec::with_capacity(spec.len());
    let mut preacts = Vec::with_capacity(spec.len());
    let mut x = input.clone();
    for (layer_spec, layer) in spec.iter().zip(layers) {
        let z = linalg::matmul(&x, &layer.w) + &layer.b;
        let a = match layer_spec.activation {
            Activation::Relu => z.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Linear => z.clone(),
        };
        layer_inputs.push(x);
        preacts.push(z);
        x = a;
    }
    Ok(SegmentTrace {
        layer_inputs,
        preacts,
        output: x,
    })
}

/// Backpropagate `grad_output` through the segment. Returns per-layer
/// parameter gradients and the gradient with respect to the segment input.
pub fn backward_segment(
    spec: &[LayerSpec],
    layers: &[LayerState],
    trace: &SegmentTrace,
    grad_output: &Array2<f64>,
) -> (Vec<LayerGrads>, Array2<f64>) {
    let mut grads: Vec<LayerGrads> = Vec::with_capacity(spec.len());
    let mut g = grad_output.clone();
    for j in (0..spec.len()).rev() {
        let dz = match spec[j].activation {
            Activation::Relu => {
                let mut dz = g.clone();
                dz.zip_mut_with(&trace.preacts[j], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                dz
            }
            Activation::Linear => g.clone(),
        };
        let dw = linalg::matmul_tn(&trace.layer_inputs[j], &dz);
        let db = dz.sum_axis(Axis(0));
        g = linalg::matmul_nt(&dz, &layers[j].w);
        grads.push(LayerGrads { w: dw, b: db });
    }
    grads.reverse();
    (grads, g)
}

/// Mean softmax cross-entropy over the batch, batch accuracy, and the loss
/// gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub accuracy: f64,
    pub dlogits: Array2<f64>,
}

pub fn softmax_xent(logits: &Array2<f64>, labels: &[usize]) -> Result<LossOutput> {
    let (batch, classes) = (logits.nrows(), logits.ncols());
    if batch == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "labels length {} does not match batch {batch}",
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Data("label id outside logit width".into()));
    }
    let mut dlogits = Array2::zeros((batch, classes));
    let mut loss = 0.0;
    let mut correct = 0usize;
    let inv_batch = 1.0 / batch as f64;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row.iter() {
            sum += (v - max).exp();
        }
        let log_sum = sum.ln();
        loss += -(row[labels[i]] - max - log_sum);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
            let p = (v - max).exp() / sum;
            dlogits[[i, c]] = p * inv_batch;
        }
        dlogits[[i, labels[i]]] -= inv_batch;
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(LossOutput {
        loss: loss * inv_batch,
        accuracy: correct as f64 / batch as f64,
        dlogits,
    })
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// AdamW hyperparameters; decay is decoupled from the moment update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update on a layer range: decoupled decay
/// `p <- p - lr*wd*p`, then bias-corrected moment update. Each layer keeps
/// its own step counter, incremented per segment update.
pub fn adamw_step(
    layers: &mut [LayerState],
    grads: &[LayerGrads],
    hyper: &AdamWHyper,
) -> Result<()> {
    if layers.len() != grads.len() {
        return Err(Error::Shape(format!(
            "adamw_step: {} layers vs {} gradient sets",
            layers.len(),
            grads.len()
        )));
    }
    for (layer, grad) in layers.iter_mut().zip(grads) {
        if grad.w.dim() != layer.w.dim() || grad.b.dim() != layer.b.dim() {
            return Err(Error::Shape("adamw_step: gradient shape mismatch".into()));
        }
        if grad.w.iter().any(|g| !g.is_finite()) || grad.b.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("adamw_step: non-finite gradient".into()));
        }
        layer.step += 1;
        let t = layer.step as i32;
        let bias1 = 1.0 - hyper.beta1.powi(t);
        let bias2 = 1.0 - hyper.beta2.powi(t);
        let decay = 1.0 - hyper.lr * hyper.weight_decay;

        for ((p, m), (v, g)) in layer
            .w
            .iter_mut()
            .zip(layer.m_w.iter_mut())
            .zip(layer.v_w.iter_mut().zip(grad.w.iter()))
        {
            *p *= decay;
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
        for ((p, m), (v, g)) in layer
            .b
            .iter_mut()
            .zip(layer.m_b.iter_mut())
            .zip(layer.v_b.iter_mut().zip(grad.b.iter()))
        {
            *p *= decay;
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Client-side execution: forward to the cut with a cached trace, backward on
/// the returned gradient. Caches are keyed by (round, device) so interleaved
/// device traffic cannot collide; each cache is consumed by its backward.
#[derive(Debug, Default)]
pub struct ClientRuntime {
    caches: HashMap<(u32, u16), (u8, SegmentTrace)>,
}

impl ClientRuntime {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forward through the client segment, caching the trace for the
    /// matching backward call.
    pub fn forward_client(
        &mut self,
        spec: &NetworkSpec,
        segment: &SegmentState,
        round: u32,
        device_id: u16,
        split: u8,
        batch: &Array2<f64>,
        labels: &[usize],
    ) -> Result<SmashedBatch> {
        if segment.base != 0 || segment.layers.is_empty() {
            return Err(Error::Shape("client segment must start at layer 0".into()));
        }
        if labels.len() != batch.nrows() || batch.nrows() == 0 {
            return Err(Error::Shape("batch/labels size mismatch".into()));
        }
        let cut = segment.layers.len();
        let trace = forward_segment(&spec.layers[..cut], &segment.layers, batch)?;
        let activations = trace.output.clone();
        self.caches.insert((round, device_id), (split, trace));
        Ok(SmashedBatch {
            round,
            device_id,
            split,
            activations,
            labels: labels.to_vec(),
        })
    }

    /// Backward through the client segment using the cached forward; the
    /// cache entry is consumed.
    pub fn backward_client(
        &mut self,
        spec: &NetworkSpec,
        segment: &SegmentState,
        grad: &GradAtCut,
    ) -> Result<Vec<LayerGrads>> {
        let key = (grad.round, grad.device_id);
        let (split, trace) = self.caches.remove(&key).ok_or_else(|| {
            Error::ProtocolOrder(format!(
                "backward without cached forward (round {}, device {})",
                grad.round, grad.device_id
            ))
        })?;
        if split != grad.split {
            return Err(Error::ProtocolOrder(format!(
                "cached split {split} does not match gradient split {} (round {}, device {})",
                grad.split, grad.round, grad.device_id
            )));
        }
        let cut = segment.layers.len();
        if grad.grad.dim() != trace.output.dim() {
            return Err(Error::Shape("gradient shape does not match smashed batch".into()));
        }
        let (grads, _) = backward_segment(&spec.layers[..cut], &segment.layers, &trace, &grad.grad);
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn small_spec() -> NetworkSpec {
        NetworkSpec::chain(&[4, 6, 5, 3]).unwrap()
    }

    fn seeded_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, &[99]);
        Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn build_is_deterministic_with_zero_biases() {
        let spec = small_spec();
        let a = build_network(&spec, 5).unwrap();
        let b = build_network(&spec, 5).unwrap();
        assert_eq!(a, b);
        for layer in a.layers() {
            assert!(layer.b.iter().all(|&v| v == 0.0));
            assert!(layer.m_w.iter().all(|&v| v == 0.0));
        }
        let c = build_network(&spec, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        let spec = NetworkSpec::chain(&[64, 128, 2]).unwrap();
        let store = build_network(&spec, 11).unwrap();
        let w = &store.layers()[0].w;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / 64.0;
        assert!(
            (var - expected).abs() / expected < 0.10,
            "var {var} vs {expected}"
        );
    }

    #[test]
    fn chain_validation_catches_breaks() {
        let mut spec = small_spec();
        spec.layers[1].in_dim = 7;
        assert!(spec.validate().is_err());
        assert!(build_network(&spec, 1).is_err());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec {
                in_dim: 3,
                out_dim: 3,
                activation: Activation::Linear,
            }],
        };
        let mut store = build_network(&spec, 1).unwrap();
        store.layers_mut()[0].w = Array2::eye(3);
        let batch = arr2(&[[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]]);
        let out = store.forward_full(&batch).unwrap();
        assert_eq!(out, batch);
    }

    #[test]
    fn split_composition_equals_monolithic_exactly() {
        let spec = small_spec();
        let store = build_network(&spec, 3).unwrap();
        let batch = seeded_batch(5, 4, 1);
        let labels = vec![0, 1, 2, 0, 1];
        let full = store.forward_full(&batch).unwrap();
        for cut in 1..spec.depth() {
            let segment = store.client_segment(cut).unwrap();
            let mut client = ClientRuntime::new();
            let smashed = client
                .forward_client(&spec, &segment, 0, 0, cut as u8, &batch, &labels)
                .unwrap();
            let server_spec = &spec.layers[cut..];
            let trace =
                forward_segment(server_spec, &store.layers()[cut..], &smashed.activations)
                    .unwrap();
            assert_eq!(trace.output, full, "cut {cut}");
        }
    }

    #[test]
    fn split_gradients_equal_monolithic_exactly() {
        let spec = small_spec();
        let store = build_network(&spec, 7).unwrap();
        let batch = seeded_batch(6, 4, 2);
        let labels = vec![0, 1, 2, 2, 1, 0];

        let full_trace = forward_segment(&spec.layers, store.layers(), &batch).unwrap();
        let loss = softmax_xent(&full_trace.output, &labels).unwrap();
        let (full_grads, _) =
            backward_segment(&spec.layers, store.layers(), &full_trace, &loss.dlogits);

        for cut in 1..spec.depth() {
            let segment = store.client_segment(cut).unwrap();
            let mut client = ClientRuntime::new();
            let smashed = client
                .forward_client(&spec, &segment, 1, 2, cut as u8, &batch, &labels)
                .unwrap();
            let server_spec = &spec.layers[cut..];
            let strace =
                forward_segment(server_spec, &store.layers()[cut..], &smashed.activations)
                    .unwrap();
            let sloss = softmax_xent(&strace.output, &labels).unwrap();
            let (server_grads, grad_at_cut) =
                backward_segment(server_spec, &store.layers()[cut..], &strace, &sloss.dlogits);
            let client_grads = client
                .backward_client(
                    &spec,
                    &segment,
                    &GradAtCut {
                        round: 1,
                        device_id: 2,
                        split: cut as u8,
                        grad: grad_at_cut,
                        loss: sloss.loss,
                        batch_accuracy: sloss.accuracy,
                    },
                )
                .unwrap();
            for (j, g) in client_grads.iter().enumerate() {
                assert_eq!(g, &full_grads[j], "client layer {j} at cut {cut}");
            }
            for (j, g) in server_grads.iter().enumerate() {
                assert_eq!(g, &full_grads[cut + j], "server layer {} at cut {cut}", cut + j);
            }
        }
    }

    #[test]
    fn forward_client_shape_error() {
        let spec = small_spec();
        let store = build_network(&spec, 3).unwrap();
        let segment = store.client_segment(2).unwrap();
        let mut client = ClientRuntime::new();
        let batch = seeded_batch(32, 5, 3); // wrong width
        let labels = vec![0; 32];
        assert!(matches!(
            client.forward_client(&spec, &segment, 0, 0, 2, &batch, &labels),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_twice_consumes_cache() {
        let spec = small_spec();
        let mut store = build_network(&spec, 3).unwrap();
        let segment = store.client_segment(2).unwrap();
        let mut client = ClientRuntime::new();
        let batch = seeded_batch(4, 4, 4);
        let labels = vec![0, 1, 2, 0];
        let smashed = client
            .forward_client(&spec, &segment, 9, 1, 2, &batch, &labels)
            .unwrap();
        let grad = store
            .forward_server_and_loss(2, &smashed, &AdamWHyper::new(1e-3, 0.0))
            .unwrap();
        assert!(client.backward_client(&spec, &segment, &grad).is_ok());
        assert!(matches!(
            client.backward_client(&spec, &segment, &grad),
            Err(Error::ProtocolOrder(_))
        ));
    }

    #[test]
    fn zero_incoming_grad_gives_zero_client_grads() {
        let spec = small_spec();
        let store = build_network(&spec, 3).unwrap();
        let segment = store.client_segment(2).unwrap();
        let mut client = ClientRuntime::new();
        let batch = seeded_batch(4, 4, 5);
        let labels = vec![0, 1, 2, 0];
        let smashed = client
            .forward_client(&spec, &segment, 0, 3, 2, &batch, &labels)
            .unwrap();
        let zero = GradAtCut {
            round: 0,
            device_id: 3,
            split: 2,
            grad: Array2::zeros(smashed.activations.dim()),
            loss: 0.0,
            batch_accuracy: 0.0,
        };
        let grads = client.backward_client(&spec, &segment, &zero).unwrap();
        for g in grads {
            assert!(g.w.iter().all(|&v| v == 0.0));
            assert!(g.b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        // Zero weights in the last layer produce equal logits.
        let spec = small_spec();
        let mut store = build_network(&spec, 8).unwrap();
        let last = store.spec().depth() - 1;
        store.layers_mut()[last].w.fill(0.0);
        let batch = seeded_batch(10, 4, 6);
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let logits = store.forward_full(&batch).unwrap();
        let out = softmax_xent(&logits, &labels).unwrap();
        assert!((out.loss - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_loss_near_zero() {
        let logits = arr2(&[[30.0, 0.0, 0.0], [0.0, 30.0, 0.0]]);
        let out = softmax_xent(&logits, &[0, 1]).unwrap();
        assert!(out.loss < 1e-10);
        assert_eq!(out.accuracy, 1.0);
    }

    #[test]
    fn adamw_fixed_point_and_decay() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec {
                in_dim: 1,
                out_dim: 1,
                activation: Activation::Linear,
            }],
        };
        let mut store = build_network(&spec, 1).unwrap();
        store.layers_mut()[0].w[[0, 0]] = 1.0;

        // wd = 0, grad = 0: parameters unchanged.
        let zero = vec![LayerGrads {
            w: Array2::zeros((1, 1)),
            b: Array1::zeros(1),
        }];
        adamw_step(store.layers_mut(), &zero, &AdamWHyper::new(0.1, 0.0)).unwrap();
        assert_eq!(store.layers()[0].w[[0, 0]], 1.0);

        // wd = 0.1, lr = 0.1, grad = 0: pure decay by 1%.
        adamw_step(store.layers_mut(), &zero, &AdamWHyper::new(0.1, 0.1)).unwrap();
        assert!((store.layers()[0].w[[0, 0]] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_hand_value() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec {
                in_dim: 1,
                out_dim: 1,
                activation: Activation::Linear,
            }],
        };
        let mut store = build_network(&spec, 1).unwrap();
        store.layers_mut()[0].w[[0, 0]] = 1.0;
        let grads = vec![LayerGrads {
            w: arr2(&[[1.0]]),
            b: Array1::zeros(1),
        }];
        adamw_step(store.layers_mut(), &grads, &AdamWHyper::new(0.1, 0.0)).unwrap();
        // Bias-corrected first step: m_hat = v_hat = 1, so
        // w = 1 - 0.1 * 1 / (1 + 1e-8).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.layers()[0].w[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_non_finite_grads() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec {
                in_dim: 1,
                out_dim: 1,
                activation: Activation::Linear,
            }],
        };
        let mut store = build_network(&spec, 1).unwrap();
        let grads = vec![LayerGrads {
            w: arr2(&[[f64::NAN]]),
            b: Array1::zeros(1),
        }];
        assert!(matches!(
            adamw_step(store.layers_mut(), &grads, &AdamWHyper::new(0.1, 0.0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn one_step_reduces_loss_on_fixed_batches() {
        let spec = default_network_spec(8, 5);
        let hyper = AdamWHyper::new(1e-3, 1e-5);
        for seed in 0..20 {
            let mut store = build_network(&spec, 100 + seed).unwrap();
            let batch = seeded_batch(32, 8, seed);
            let labels: Vec<usize> = (0..32).map(|i| i % 5).collect();
            let trace = forward_segment(&spec.layers, store.layers(), &batch).unwrap();
            let before = softmax_xent(&trace.output, &labels).unwrap().loss;
            store.train_full_batch(&batch, &labels, &hyper).unwrap();
            let trace = forward_segment(&spec.layers, store.layers(), &batch).unwrap();
            let after = softmax_xent(&trace.output, &labels).unwrap().loss;
            assert!(after <= before, "seed {seed}: {after} > {before}");
        }
    }

    #[test]
    fn server_rejects_non_finite_activations() {
        let spec = small_spec();
        let mut store = build_network(&spec, 3).unwrap();
        let mut act = seeded_batch(4, 6, 9);
        act[[0, 0]] = f64::NAN;
        let smashed = SmashedBatch {
            round: 7,
            device_id: 4,
            split: 1,
            activations: act,
            labels: vec![0, 1, 2, 0],
        };
        let err = store
            .forward_server_and_loss(1, &smashed, &AdamWHyper::new(1e-3, 0.0))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("round 7") && msg.contains("device 4"), "{msg}");
    }
}
