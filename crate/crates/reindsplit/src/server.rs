//! Canonical parameter store behind the wire protocol.
//!
//! The server owns the authoritative model. Devices pull client segments,
//! ship smashed activations, and push updated segments back; every exchange
//! passes through the binary codec, so loopback and socket runs are
//! bit-identical.
//!
//! Merge modes:
//! - sequential: pulls read the live store and pushes land immediately, in
//!   the order devices interact (the orchestrator drives devices in index
//!   order);
//! - averaged: all reads within a round hit a round-start snapshot, every
//!   per-device delta (client and server segments alike) is recorded, and
//!   the per-layer mean delta lands at round end.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::config::MergeMode;
use crate::error::{Error, Result};
use crate::proto::{self, Message, WireTensor};
use crate::splitnet::{AdamWHyper, LayerState, ParamStore, SmashedBatch, SplitCatalog};

/// Serialize a segment for the wire: seven tensors per layer
/// (w, b, m_w, v_w, m_b, v_b, step), all cast to f32.
pub fn segment_to_tensors(layers: &[LayerState]) -> Vec<WireTensor> {
    let mut tensors = Vec::with_capacity(layers.len() * 7);
    for layer in layers {
        tensors.push(WireTensor::from_matrix(&layer.w));
        tensors.push(WireTensor::from_vec_f64(layer.b.as_slice().unwrap()));
        tensors.push(WireTensor::from_matrix(&layer.m_w));
        tensors.push(WireTensor::from_matrix(&layer.v_w));
        tensors.push(WireTensor::from_vec_f64(layer.m_b.as_slice().unwrap()));
        tensors.push(WireTensor::from_vec_f64(layer.v_b.as_slice().unwrap()));
        tensors.push(WireTensor {
            dims: vec![1],
            data: vec![layer.step as f32],
        });
    }
    tensors
}

/// Reassemble segment state from wire tensors, validating shapes against
/// the expected layer dimensions.
pub fn tensors_to_segment(
    tensors: &[WireTensor],
    dims: &[(usize, usize)],
) -> Result<Vec<LayerState>> {
    if tensors.len() != dims.len() * 7 {
        return Err(Error::Proto(proto::ProtoError::Malformed(format!(
            "segment with {} tensors for {} layers",
            tensors.len(),
            dims.len()
        ))));
    }
    let mut layers = Vec::with_capacity(dims.len());
    for (i, &(in_dim, out_dim)) in dims.iter().enumerate() {
        let t = &tensors[i * 7..(i + 1) * 7];
        let w = t[0].to_matrix().map_err(Error::Proto)?;
        let m_w = t[2].to_matrix().map_err(Error::Proto)?;
        let v_w = t[3].to_matrix().map_err(Error::Proto)?;
        if w.dim() != (in_dim, out_dim)
            || m_w.dim() != (in_dim, out_dim)
            || v_w.dim() != (in_dim, out_dim)
        {
            return Err(Error::Shape(format!(
                "segment layer {i}: expected {in_dim}x{out_dim} weights"
            )));
        }
        let b = Array1::from_vec(t[1].to_vec_f64().map_err(Error::Proto)?);
        let m_b = Array1::from_vec(t[4].to_vec_f64().map_err(Error::Proto)?);
        let v_b = Array1::from_vec(t[5].to_vec_f64().map_err(Error::Proto)?);
        if b.len() != out_dim || m_b.len() != out_dim || v_b.len() != out_dim {
            return Err(Error::Shape(format!(
                "segment layer {i}: expected {out_dim}-wide bias"
            )));
        }
        let step_vec = t[6].to_vec_f64().map_err(Error::Proto)?;
        if step_vec.len() != 1 || step_vec[0] < 0.0 || step_vec[0].fract() != 0.0 {
            return Err(Error::Shape(format!("segment layer {i}: bad step counter")));
        }
        layers.push(LayerState {
            w,
            b,
            m_w,
            v_w,
            m_b,
            v_b,
            step: step_vec[0] as u64,
        });
    }
    Ok(layers)
}

/// Delta of one layer against the round-start snapshot.
#[derive(Debug, Clone)]
struct LayerDelta {
    w: Array2<f64>,
    b: Array1<f64>,
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
    step: u64,
}

fn layer_delta(new: &LayerState, old: &LayerState) -> LayerDelta {
    LayerDelta {
        w: &new.w - &old.w,
        b: &new.b - &old.b,
        m_w: &new.m_w - &old.m_w,
        v_w: &new.v_w - &old.v_w,
        m_b: &new.m_b - &old.m_b,
        v_b: &new.v_b - &old.v_b,
        step: new.step,
    }
}

#[derive(Debug, Default)]
struct AveragedRound {
    /// layer index -> (device id -> delta); BTreeMaps pin the merge order.
    contributions: BTreeMap<usize, BTreeMap<u16, LayerDelta>>,
}

pub struct ModelServer {
    store: ParamStore,
    catalog: SplitCatalog,
    hyper: AdamWHyper,
    merge_mode: MergeMode,
    snapshot: Option<ParamStore>,
    round_state: AveragedRound,
}

impl ModelServer {
    pub fn new(
        store: ParamStore,
        catalog: SplitCatalog,
        hyper: AdamWHyper,
        merge_mode: MergeMode,
    ) -> Self {
        Self {
            store,
            catalog,
            hyper,
            merge_mode,
            snapshot: None,
            round_state: AveragedRound::default(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn catalog(&self) -> &SplitCatalog {
        &self.catalog
    }

    /// Open a round. In averaged mode this snapshots the store; every read
    /// until `end_round` sees the snapshot.
    pub fn begin_round(&mut self) {
        if self.merge_mode == MergeMode::Averaged {
            self.snapshot = Some(self.store.clone());
            self.round_state = AveragedRound::default();
        }
    }

    /// Close a round. In averaged mode the mean per-layer delta over
    /// contributing devices lands on the canonical store.
    pub fn end_round(&mut self) -> Result<()> {
        if self.merge_mode != MergeMode::Averaged {
            return Ok(());
        }
        let snapshot = self
            .snapshot
            .take()
            .ok_or_else(|| Error::Runtime("end_round without begin_round".into()))?;
        let round = std::mem::take(&mut self.round_state);
        self.store = snapshot;
        for (layer_idx, devices) in round.contributions {
            let n = devices.len() as f64;
            let layer = &mut self.store.layers_mut()[layer_idx];
            let mut max_step = layer.step;
            for delta in devices.values() {
                layer.w.scaled_add(1.0 / n, &delta.w);
                layer.b.scaled_add(1.0 / n, &delta.b);
                layer.m_w.scaled_add(1.0 / n, &delta.m_w);
                layer.v_w.scaled_add(1.0 / n, &delta.v_w);
                layer.m_b.scaled_add(1.0 / n, &delta.m_b);
                layer.v_b.scaled_add(1.0 / n, &delta.v_b);
                max_step = max_step.max(delta.step);
            }
            layer.step = max_step;
        }
        Ok(())
    }

    /// The model a device observes right after its own update: in averaged
    /// mode the snapshot plus the device's own deltas, in sequential mode
    /// the live canonical store.
    pub fn device_view(&self, device_id: u16) -> ParamStore {
        match (&self.snapshot, self.merge_mode) {
            (Some(snapshot), MergeMode::Averaged) => {
                let mut view = snapshot.clone();
                for (layer_idx, devices) in &self.round_state.contributions {
                    if let Some(delta) = devices.get(&device_id) {
                        let layer = &mut view.layers_mut()[*layer_idx];
                        layer.w += &delta.w;
                        layer.b += &delta.b;
                        layer.m_w += &delta.m_w;
                        layer.v_w += &delta.v_w;
                        layer.m_b += &delta.m_b;
                        layer.v_b += &delta.v_b;
                        layer.step = delta.step;
                    }
                }
                view
            }
            _ => self.store.clone(),
        }
    }

    /// Post-update accuracy for `device_id` on the given evaluation rows.
    pub fn eval_accuracy(
        &self,
        device_id: u16,
        features: &Array2<f64>,
        labels: &[usize],
    ) -> Result<f64> {
        let preds = match (&self.snapshot, self.merge_mode) {
            (Some(_), MergeMode::Averaged) => self.device_view(device_id).predict(features)?,
            _ => self.store.predict(features)?,
        };
        let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    fn read_store(&self) -> &ParamStore {
        match (&self.snapshot, self.merge_mode) {
            (Some(snapshot), MergeMode::Averaged) => snapshot,
            _ => &self.store,
        }
    }

    fn segment_dims(&self, cut_layer: usize) -> Vec<(usize, usize)> {
        self.store.spec().layers[..cut_layer]
            .iter()
            .map(|l| (l.in_dim, l.out_dim))
            .collect()
    }

    fn record_deltas(&mut self, device_id: u16, base: usize, new: &[LayerState]) {
        let snapshot = self.snapshot.as_ref().expect("averaged round open");
        let deltas: Vec<(usize, LayerDelta)> = new
            .iter()
            .enumerate()
            .map(|(offset, layer)| {
                let idx = base + offset;
                (idx, layer_delta(layer, &snapshot.layers()[idx]))
            })
            .collect();
        for (idx, delta) in deltas {
            self.round_state
                .contributions
                .entry(idx)
                .or_default()
                .insert(device_id, delta);
        }
    }

    /// Handle one decoded request and produce the response message.
    pub fn handle_message(&mut self, msg: &Message) -> Result<Message> {
        match msg {
            Message::ParamPullRequest { round, device_id, split } => {
                let cut = self.catalog.entry(*split as usize)?.cut_layer;
                let layers = &self.read_store().layers()[..cut];
                Ok(Message::ParamSegment {
                    round: *round,
                    device_id: *device_id,
                    split: *split,
                    tensors: segment_to_tensors(layers),
                })
            }
            Message::Smashed { round, device_id, split, activations, labels } => {
                let cut = self.catalog.entry(*split as usize)?.cut_layer;
                let smashed = SmashedBatch {
                    round: *round,
                    device_id: *device_id,
                    split: *split,
                    activations: activations.to_matrix().map_err(Error::Proto)?,
                    labels: labels.iter().map(|&l| l as usize).collect(),
                };
                let hyper = self.hyper;
                let grad = match self.merge_mode {
                    MergeMode::Sequential => {
                        self.store.forward_server_and_loss(cut, &smashed, &hyper)?
                    }
                    MergeMode::Averaged => {
                        let mut work = self
                            .snapshot
                            .as_ref()
                            .ok_or_else(|| {
                                Error::Runtime("smashed batch outside an open round".into())
                            })?
                            .clone();
                        let grad = work.forward_server_and_loss(cut, &smashed, &hyper)?;
                        let server_layers = work.layers()[cut..].to_vec();
                        self.record_deltas(*device_id, cut, &server_layers);
                        grad
                    }
                };
                Ok(Message::GradAtCut {
                    round: *round,
                    device_id: *device_id,
                    split: *split,
                    grad: WireTensor::from_matrix(&grad.grad),
                    loss: grad.loss as f32,
                    batch_accuracy: grad.batch_accuracy as f32,
                })
            }
            Message::ParamPush { round, device_id, split, tensors } => {
                let cut = self.catalog.entry(*split as usize)?.cut_layer;
                let dims = self.segment_dims(cut);
                let layers = tensors_to_segment(tensors, &dims)?;
                match self.merge_mode {
                    MergeMode::Sequential => {
                        for (idx, layer) in layers.into_iter().enumerate() {
                            self.store.layers_mut()[idx] = layer;
                        }
                    }
                    MergeMode::Averaged => {
                        if self.snapshot.is_none() {
                            return Err(Error::Runtime(
                                "segment push outside an open round".into(),
                            ));
                        }
                        self.record_deltas(*device_id, 0, &layers);
                    }
                }
                // Acknowledge with an empty segment frame.
                Ok(Message::ParamSegment {
                    round: *round,
                    device_id: *device_id,
                    split: *split,
                    tensors: vec![],
                })
            }
            Message::GradAtCut { device_id, .. } | Message::ParamSegment { device_id, .. } => {
                Err(Error::ProtocolOrder(format!(
                    "server received a response-type message from device {device_id}"
                )))
            }
        }
    }

    /// Byte-level entry point used by both transports.
    pub fn handle_frame(&mut self, frame: &[u8]) -> Result<Vec<u8>> {
        let msg = proto::decode(frame)?;
        let response = self.handle_message(&msg)?;
        Ok(proto::encode(&response)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splitnet::{build_network, catalog_cuts, default_network_spec};

    fn setup(merge_mode: MergeMode) -> ModelServer {
        let spec = default_network_spec(8, 5);
        let store = build_network(&spec, 1).unwrap();
        let catalog = catalog_cuts(&spec, 5, [0.5, 7.5]).unwrap();
        ModelServer::new(store, catalog, AdamWHyper::new(1e-3, 0.0), merge_mode)
    }

    fn perturbed_segment(server: &ModelServer, cut: usize, delta: f64) -> Vec<WireTensor> {
        let mut layers = server.store().layers()[..cut].to_vec();
        for layer in &mut layers {
            layer.w.mapv_inplace(|v| v + delta);
            layer.step += 1;
        }
        segment_to_tensors(&layers)
    }

    #[test]
    fn segment_round_trip_preserves_f32_values() {
        let server = setup(MergeMode::Sequential);
        let layers = server.store().layers()[..2].to_vec();
        let tensors = segment_to_tensors(&layers);
        let dims: Vec<(usize, usize)> = layers.iter().map(|l| l.w.dim()).collect();
        let back = tensors_to_segment(&tensors, &dims).unwrap();
        for (orig, round_tripped) in layers.iter().zip(&back) {
            for (a, b) in orig.w.iter().zip(round_tripped.w.iter()) {
                assert_eq!(*a as f32, *b as f32);
                assert_eq!(*b, (*a as f32) as f64);
            }
            assert_eq!(orig.step, round_tripped.step);
        }
    }

    #[test]
    fn pull_returns_segment_of_requested_cut() {
        let mut server = setup(MergeMode::Sequential);
        let resp = server
            .handle_message(&Message::ParamPullRequest {
                round: 0,
                device_id: 1,
                split: 3,
            })
            .unwrap();
        let cut = server.catalog().entry(3).unwrap().cut_layer;
        match resp {
            Message::ParamSegment { tensors, .. } => {
                assert_eq!(tensors.len(), cut * 7);
            }
            other => panic!("unexpected response {other:?}"),
        }
    }

    #[test]
    fn sequential_push_overwrites_in_order() {
        let mut server = setup(MergeMode::Sequential);
        server.begin_round();
        let cut = server.catalog().entry(1).unwrap().cut_layer;

        let push1 = perturbed_segment(&server, cut, 0.25);
        let push2 = perturbed_segment(&server, cut, -0.50);
        for (device, tensors) in [(0u16, push1), (1u16, push2.clone())] {
            server
                .handle_message(&Message::ParamPush {
                    round: 0,
                    device_id: device,
                    split: 1,
                    tensors,
                })
                .unwrap();
        }
        server.end_round().unwrap();

        // Final store equals the last push (applied after the first).
        let dims = server.segment_dims(cut);
        let want = tensors_to_segment(&push2, &dims).unwrap();
        for (got, want) in server.store().layers()[..cut].iter().zip(&want) {
            assert_eq!(got.w, want.w);
        }
    }

    #[test]
    fn averaged_opposite_deltas_cancel() {
        let mut server = setup(MergeMode::Averaged);
        let before = server.store().clone();
        server.begin_round();
        let cut = server.catalog().entry(1).unwrap().cut_layer;

        let base = server.store().layers()[..cut].to_vec();
        for (device, sign) in [(0u16, 1.0f64), (1u16, -1.0f64)] {
            let mut layers = base.clone();
            for layer in &mut layers {
                layer.w.mapv_inplace(|v| v + sign * 0.5);
            }
            server
                .handle_message(&Message::ParamPush {
                    round: 0,
                    device_id: device,
                    split: 1,
                    tensors: segment_to_tensors(&layers),
                })
                .unwrap();
        }
        server.end_round().unwrap();
        for (got, want) in server.store().layers().iter().zip(before.layers()) {
            for (g, w) in got.w.iter().zip(want.w.iter()) {
                assert!((g - w).abs() < 1e-7, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn single_device_same_result_in_both_modes() {
        let mut sequential = setup(MergeMode::Sequential);
        let mut averaged = setup(MergeMode::Averaged);
        let cut = sequential.catalog().entry(2).unwrap().cut_layer;
        let push = perturbed_segment(&sequential, cut, 0.125);

        for server in [&mut sequential, &mut averaged] {
            server.begin_round();
            server
                .handle_message(&Message::ParamPush {
                    round: 0,
                    device_id: 0,
                    split: 2,
                    tensors: push.clone(),
                })
                .unwrap();
            server.end_round().unwrap();
        }
        for (a, b) in sequential
            .store()
            .layers()
            .iter()
            .zip(averaged.store().layers())
        {
            for (x, y) in a.w.iter().zip(b.w.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_response_type_messages() {
        let mut server = setup(MergeMode::Sequential);
        let err = server
            .handle_message(&Message::GradAtCut {
                round: 0,
                device_id: 0,
                split: 1,
                grad: WireTensor {
                    dims: vec![1, 1],
                    data: vec![0.0],
                },
                loss: 0.0,
                batch_accuracy: 0.0,
            })
            .unwrap_err();
        assert!(matches!(err, Error::ProtocolOrder(_)));
    }

    #[test]
    fn smashed_message_trains_server_segment_and_returns_grad() {
        let mut server = setup(MergeMode::Sequential);
        let cut = server.catalog().entry(2).unwrap().cut_layer;
        let width = server.store().spec().layers[cut - 1].out_dim;
        let before = server.store().clone();
        let acts = Array2::from_elem((4, width), 0.3);
        let resp = server
            .handle_message(&Message::Smashed {
                round: 5,
                device_id: 2,
                split: 2,
                activations: WireTensor::from_matrix(&acts),
                labels: vec![0, 1, 2, 3],
            })
            .unwrap();
        match resp {
            Message::GradAtCut { grad, loss, .. } => {
                assert_eq!(grad.dims, vec![4, width as u32]);
                assert!(loss.is_finite() && loss > 0.0);
            }
            other => panic!("unexpected response {other:?}"),
        }
        // Server layers moved, client layers did not.
        for idx in 0..cut {
            assert_eq!(server.store().layers()[idx].w, before.layers()[idx].w);
        }
        assert_ne!(
            server.store().layers()[cut].w,
            before.layers()[cut].w
        );
    }
}
