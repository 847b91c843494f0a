//! End-to-end round/episode loop: data sharding, action selection, split
//! execution through the protocol layer, parameter merging, evaluation, and
//! straggler accounting.
//!
//! Determinism contract: every random draw comes from a stream derived from
//! `(seed, scope, episode, step, device)`, merges land in device-index
//! order, and all cross-host values travel through the wire codec under
//! every transport. Two runs with the same config and seed produce the same
//! artifacts byte for byte, under loopback or localhost sockets, serial or
//! parallel device execution.

use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;

use crate::agent::{
    dqn_train_step, normalize_state, select_action, sync_target, EpsilonSchedule, QNetwork,
    ReplayBuffer, Transition,
};
use crate::config::{AgentMode, DistributionKind, ExperimentConfig, MergeMode, RewardMode};
use crate::data::{make_blobs, split_train_val_test, Split, TaggedDataset};
use crate::env::{compute_reward, feasibility, init_devices, DeviceDynamics, DeviceState};
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, Metrics};
use crate::proto::{self, Message, StreamEndpoint, Transport, WireTensor};
use crate::rng::{derive_seed, scope, stream};
use crate::server::{segment_to_tensors, tensors_to_segment, ModelServer};
use crate::splitnet::{
    adamw_step, build_network, catalog_with_overrides, default_network_spec, AdamWHyper,
    ClientRuntime, GradAtCut, NetworkSpec, ParamStore, SegmentState, SplitCatalog,
};

/// Which transport carries device/server traffic.
#[derive(Debug, Clone, Default)]
pub enum TransportConfig {
    /// In-process frame queues.
    #[default]
    Loopback,
    /// Real sockets on a reliable byte stream. `listen` is the bind address
    /// for the in-process server loop; `connect` overrides where devices
    /// dial (defaults to the bound address).
    Stream {
        listen: String,
        connect: Option<String>,
    },
}

/// Per-device training shard and validation subset (indices into the
/// dataset).
#[derive(Debug, Clone, PartialEq)]
pub struct ShardAssignment {
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
}

fn shuffled(mut items: Vec<usize>, seed: u64, tags: &[u64]) -> Vec<usize> {
    use rand::Rng;
    let mut rng = stream(seed, tags);
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
    items
}

fn deal_round_robin(items: &[usize], n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::with_capacity(items.len() / n + 1); n];
    for (i, &idx) in items.iter().enumerate() {
        out[i % n].push(idx);
    }
    out
}

/// Uniform random partition of the training set; shard sizes within one of
/// each other. Validation indices are dealt the same way.
pub fn shard_iid(ds: &TaggedDataset, n_devices: usize, seed: u64) -> Result<ShardAssignment> {
    let train = ds.indices(Split::Train);
    if n_devices == 0 || n_devices > train.len() {
        return Err(Error::Data(format!(
            "cannot shard {} training samples across {n_devices} devices",
            train.len()
        )));
    }
    let train = shuffled(train, seed, &[scope::SHARD, 0]);
    let val = shuffled(ds.indices(Split::Val), seed, &[scope::SHARD, 1]);
    Ok(ShardAssignment {
        train: deal_round_robin(&train, n_devices),
        val: deal_round_robin(&val, n_devices),
    })
}

/// Class-skewed sharding: sort training indices by label, slice into
/// `n_devices * shards_per_client` contiguous shards, deal each device
/// `shards_per_client` shards at random.
pub fn shard_noniid(
    ds: &TaggedDataset,
    n_devices: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<ShardAssignment> {
    let mut train = ds.indices(Split::Train);
    let n_shards = n_devices
        .checked_mul(shards_per_client)
        .ok_or_else(|| Error::Data("shard count overflow".into()))?;
    if n_shards == 0 || train.len() < n_shards {
        return Err(Error::Data(format!(
            "{} training samples cannot fill {n_shards} shards",
            train.len()
        )));
    }
    train.sort_by_key(|&i| (ds.data.labels[i], i));

    let base = train.len() / n_shards;
    let extra = train.len() % n_shards;
    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(n_shards);
    let mut cursor = 0;
    for s in 0..n_shards {
        let len = base + usize::from(s < extra);
        shards.push(train[cursor..cursor + len].to_vec());
        cursor += len;
    }

    let order = shuffled((0..n_shards).collect(), seed, &[scope::SHARD, 2]);
    let mut per_device: Vec<Vec<usize>> = vec![Vec::new(); n_devices];
    for (pos, &shard_idx) in order.iter().enumerate() {
        per_device[pos / shards_per_client].extend_from_slice(&shards[shard_idx]);
    }

    let val = shuffled(ds.indices(Split::Val), seed, &[scope::SHARD, 1]);
    Ok(ShardAssignment {
        train: per_device,
        val: deal_round_robin(&val, n_devices),
    })
}

/// One row of the per-device per-step log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub episode: u32,
    pub step: u32,
    pub device_id: u16,
    pub available: bool,
    pub r_t: f64,
    pub t_t: f64,
    pub action: Option<usize>,
    pub feasible: Option<bool>,
    pub reward: Option<f64>,
    pub acc: Option<f64>,
    pub client_load: Option<f64>,
    pub straggler: bool,
    pub epsilon: f64,
    pub q_loss: Option<f64>,
}

/// Per-episode aggregates backing the split-frequency and straggler
/// figures.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeStats {
    pub episode: u32,
    /// Action counts over available device-steps, index k-1.
    pub split_counts: Vec<u64>,
    /// Mean post-update validation accuracy over executed steps.
    pub mean_val_acc: f64,
    pub straggler_rate: f64,
    pub available_steps: u64,
    pub mean_reward: f64,
    pub max_client_grad_norm: f64,
}

/// Everything a run produces, sufficient to regenerate every figure input.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub episodes: Vec<EpisodeStats>,
    pub final_metrics: Metrics,
    pub wall_time_seconds: f64,
    pub feasible_steps: u64,
    pub transitions_pushed: u64,
    pub mean_reward: f64,
    /// Trained policy networks: one for the shared agent, or one per
    /// device.
    pub qnets: Vec<QNetwork>,
}

struct AgentSlot {
    qnet: QNetwork,
    target: QNetwork,
    buffer: ReplayBuffer,
    transitions: u64,
    last_q_loss: Option<f64>,
}

enum DeviceLink {
    Local(Arc<Mutex<ModelServer>>),
    Stream(StreamEndpoint),
}

impl DeviceLink {
    fn exchange(&mut self, msg: &Message) -> Result<Message> {
        let frame = proto::encode(msg)?;
        let response = match self {
            DeviceLink::Local(server) => {
                let mut server = server.lock().expect("server lock");
                server.handle_frame(&frame)?
            }
            DeviceLink::Stream(endpoint) => {
                endpoint.send(&frame)?;
                endpoint.recv()?
            }
        };
        Ok(proto::decode(&response)?)
    }
}

struct DeviceCtx {
    id: u16,
    link: DeviceLink,
    client: ClientRuntime,
    last_acc: f64,
}

struct DeviceOutcome {
    record: RoundRecord,
    transition: Option<Transition>,
    next_state: DeviceState,
    client_grad_norm: Option<f64>,
}

struct RunCtx {
    cfg: ExperimentConfig,
    spec: NetworkSpec,
    catalog: SplitCatalog,
    dataset: TaggedDataset,
    shards: ShardAssignment,
    dynamics: DeviceDynamics,
    hyper: AdamWHyper,
    server: Arc<Mutex<ModelServer>>,
}

fn gather_rows(features: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), features.ncols()));
    for (row, &idx) in indices.iter().enumerate() {
        out.row_mut(row).assign(&features.row(idx));
    }
    out
}

fn sample_without_replacement(pool: &[usize], count: usize, seed: u64, tags: &[u64]) -> Vec<usize> {
    use rand::Rng;
    let count = count.min(pool.len());
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = stream(seed, tags);
    for i in 0..count {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    order[..count].iter().map(|&i| pool[i]).collect()
}

impl RunCtx {
    /// Everything one device does in one round. All draws come from
    /// per-device streams and all server reads are snapshot-based in
    /// averaged mode, so device scheduling cannot change results.
    fn device_step(
        &self,
        ctx: &mut DeviceCtx,
        state: &DeviceState,
        qnet: &QNetwork,
        episode: u32,
        step: u32,
        epsilon: f64,
    ) -> Result<DeviceOutcome> {
        let cfg = &self.cfg;
        let round = episode * cfg.steps_per_episode as u32 + step;
        let (e_tag, s_tag, d_tag) = (episode as u64, step as u64, ctx.id as u64);
        let next_state = self.dynamics.step(
            state,
            &mut stream(cfg.seed, &[scope::DEVICE_STEP, e_tag, s_tag, d_tag]),
        );

        if !state.available {
            return Ok(DeviceOutcome {
                record: RoundRecord {
                    episode,
                    step,
                    device_id: ctx.id,
                    available: false,
                    r_t: state.r_t,
                    t_t: state.t_t,
                    action: None,
                    feasible: None,
                    reward: None,
                    acc: None,
                    client_load: None,
                    straggler: false,
                    epsilon,
                    q_loss: None,
                },
                transition: None,
                next_state,
                client_grad_norm: None,
            });
        }

        let perf = cfg.state_includes_perf.then_some(ctx.last_acc);
        let s_vec = normalize_state(state.r_t, state.t_t, perf, cfg.capacity_range[1]);
        let q_values = qnet.q_forward(&s_vec)?;
        let action = select_action(
            &q_values,
            epsilon,
            &mut stream(cfg.seed, &[scope::ACTION, e_tag, s_tag, d_tag]),
        )?;
        let report = feasibility(state, &self.catalog)?;
        let feasible = report.feasible(action);
        let straggler = !feasible;
        let executes = feasible || cfg.reward.mode == RewardMode::Soft;

        let device_id = ctx.id;
        let attribute =
            |e: Error| Error::Runtime(format!("device {device_id} round {round}: {e}"));

        let mut acc = 0.0;
        let mut grad_norm = None;
        if executes {
            let cut = self.catalog.entry(action)?.cut_layer;

            // Pull the client segment (params + optimizer state) over the
            // wire; values arrive f32-quantized by design.
            let pull = Message::ParamPullRequest {
                round,
                device_id: ctx.id,
                split: action as u8,
            };
            let segment_msg = ctx.link.exchange(&pull).map_err(attribute)?;
            let Message::ParamSegment { tensors, .. } = segment_msg else {
                return Err(Error::ProtocolOrder(format!(
                    "device {device_id} expected a segment in response to its pull"
                )));
            };
            let dims: Vec<(usize, usize)> = self.spec.layers[..cut]
                .iter()
                .map(|l| (l.in_dim, l.out_dim))
                .collect();
            let mut segment_layers = tensors_to_segment(&tensors, &dims)?;

            // One minibatch from this device's shard.
            let batch_idx = sample_without_replacement(
                &self.shards.train[ctx.id as usize],
                cfg.batch_size,
                cfg.seed,
                &[scope::BATCH, e_tag, s_tag, d_tag],
            );
            let batch = gather_rows(&self.dataset.data.features, &batch_idx);
            let labels: Vec<usize> = batch_idx
                .iter()
                .map(|&i| self.dataset.data.labels[i])
                .collect();

            let segment = SegmentState {
                base: 0,
                layers: segment_layers.clone(),
            };
            let smashed = ctx.client.forward_client(
                &self.spec,
                &segment,
                round,
                ctx.id,
                action as u8,
                &batch,
                &labels,
            )?;

            let smashed_msg = Message::Smashed {
                round,
                device_id: ctx.id,
                split: action as u8,
                activations: WireTensor::from_matrix(&smashed.activations),
                labels: labels.iter().map(|&l| l as u32).collect(),
            };
            let grad_msg = ctx.link.exchange(&smashed_msg).map_err(attribute)?;
            let Message::GradAtCut { grad, loss, batch_accuracy, .. } = grad_msg else {
                return Err(Error::ProtocolOrder(format!(
                    "device {device_id} expected a gradient in response to smashed data"
                )));
            };
            let grad_at_cut = GradAtCut {
                round,
                device_id: ctx.id,
                split: action as u8,
                grad: grad.to_matrix().map_err(Error::Proto)?,
                loss: loss as f64,
                batch_accuracy: batch_accuracy as f64,
            };

            let client_grads = ctx
                .client
                .backward_client(&self.spec, &segment, &grad_at_cut)?;
            grad_norm = Some(
                client_grads
                    .iter()
                    .map(|g| g.norm_sq())
                    .sum::<f64>()
                    .sqrt(),
            );

            adamw_step(&mut segment_layers, &client_grads, &self.hyper)?;

            let push = Message::ParamPush {
                round,
                device_id: ctx.id,
                split: action as u8,
                tensors: segment_to_tensors(&segment_layers),
            };
            let ack = ctx.link.exchange(&push).map_err(attribute)?;
            if !matches!(ack, Message::ParamSegment { ref tensors, .. } if tensors.is_empty()) {
                return Err(Error::ProtocolOrder(format!(
                    "device {device_id} expected an empty-segment ack for its push"
                )));
            }

            // Post-update accuracy on a validation subsample.
            let val_idx = sample_without_replacement(
                &self.shards.val[ctx.id as usize],
                256,
                cfg.seed,
                &[scope::VAL_SAMPLE, e_tag, s_tag, d_tag],
            );
            let val_feats = gather_rows(&self.dataset.data.features, &val_idx);
            let val_labels: Vec<usize> = val_idx
                .iter()
                .map(|&i| self.dataset.data.labels[i])
                .collect();
            acc = self
                .server
                .lock()
                .expect("server lock")
                .eval_accuracy(ctx.id, &val_feats, &val_labels)?;
            ctx.last_acc = acc;
        }

        let reward = compute_reward(acc, &report, action, &cfg.reward);
        let next_perf = cfg.state_includes_perf.then_some(ctx.last_acc);
        let s_next = normalize_state(
            next_state.r_t,
            next_state.t_t,
            next_perf,
            cfg.capacity_range[1],
        );
        let terminal = step as usize + 1 == cfg.steps_per_episode;

        Ok(DeviceOutcome {
            record: RoundRecord {
                episode,
                step,
                device_id: ctx.id,
                available: true,
                r_t: state.r_t,
                t_t: state.t_t,
                action: Some(action),
                feasible: Some(feasible),
                reward: Some(reward),
                acc: executes.then_some(acc),
                client_load: Some(self.catalog.client_load(action)?),
                straggler,
                epsilon,
                q_loss: None,
            },
            transition: Some(Transition {
                state: s_vec,
                action,
                reward,
                next_state: s_next,
                terminal,
            }),
            next_state,
            client_grad_norm: grad_norm,
        })
    }
}

fn agent_index(mode: AgentMode, device: u16) -> usize {
    match mode {
        AgentMode::Shared => 0,
        AgentMode::PerDevice => device as usize,
    }
}

/// Build the dataset/shard/network stack shared by training and baselines.
fn build_pipeline(
    cfg: &ExperimentConfig,
) -> Result<(
    TaggedDataset,
    ShardAssignment,
    NetworkSpec,
    ParamStore,
    SplitCatalog,
)> {
    let data = make_blobs(
        cfg.data.samples,
        cfg.data.classes,
        cfg.data.dim,
        cfg.data.spread,
        cfg.seed,
    )?;
    let tagged = split_train_val_test(data, cfg.seed)?;
    let shards = match cfg.distribution.kind {
        DistributionKind::Iid => shard_iid(&tagged, cfg.n_devices, cfg.seed)?,
        DistributionKind::Noniid => shard_noniid(
            &tagged,
            cfg.n_devices,
            cfg.distribution.shards_per_client,
            cfg.seed,
        )?,
    };
    let spec = default_network_spec(cfg.data.dim, cfg.data.classes);
    let store = build_network(&spec, derive_seed(cfg.seed, &[scope::NET_INIT]))?;
    let catalog = catalog_with_overrides(
        &spec,
        cfg.n_splits,
        cfg.capacity_range,
        cfg.cost_table.as_deref(),
    )?;
    Ok((tagged, shards, spec, store, catalog))
}

/// Metrics of a parameter store on one split of the dataset.
pub fn evaluate_global(store: &ParamStore, ds: &TaggedDataset, split: Split) -> Result<Metrics> {
    let idx = ds.indices(split);
    let feats = gather_rows(&ds.data.features, &idx);
    let labels: Vec<usize> = idx.iter().map(|&i| ds.data.labels[i]).collect();
    let preds = store.predict(&feats)?;
    classification_metrics(&preds, &labels, ds.data.n_classes)
}

fn spawn_stream_server(
    server: Arc<Mutex<ModelServer>>,
    listener: TcpListener,
    n_connections: usize,
) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        let mut handlers = Vec::new();
        for _ in 0..n_connections {
            let Ok((socket, _)) = listener.accept() else {
                break;
            };
            let server = server.clone();
            handlers.push(std::thread::spawn(move || {
                let cap = proto::DEFAULT_MAX_PAYLOAD + proto::HEADER_LEN as u32;
                let Ok(mut endpoint) = StreamEndpoint::new(socket, cap) else {
                    return;
                };
                // Per-connection processing is serialized; connections
                // multiplex on the shared server.
                while let Ok(frame) = endpoint.recv() {
                    let response = {
                        let mut server = server.lock().expect("server lock");
                        match server.handle_frame(&frame) {
                            Ok(r) => r,
                            Err(_) => break,
                        }
                    };
                    if endpoint.send(&response).is_err() {
                        break;
                    }
                }
            }));
        }
        for h in handlers {
            let _ = h.join();
        }
    })
}

/// Run the full dynamic-split training loop.
pub fn run_training(cfg: &ExperimentConfig, transport: &TransportConfig) -> Result<RunArtifacts> {
    let started = Instant::now();
    cfg.validate()?;
    let (dataset, shards, spec, store, catalog) = build_pipeline(cfg)?;
    let hyper = AdamWHyper::new(cfg.lr, cfg.weight_decay);

    let server = Arc::new(Mutex::new(ModelServer::new(
        store,
        catalog.clone(),
        hyper,
        cfg.merge_mode,
    )));

    let mut links = Vec::with_capacity(cfg.n_devices);
    let mut server_thread = None;
    match transport {
        TransportConfig::Loopback => {
            for _ in 0..cfg.n_devices {
                links.push(DeviceLink::Local(server.clone()));
            }
        }
        TransportConfig::Stream { listen, connect } => {
            let listener = TcpListener::bind(listen.as_str())?;
            let local_addr = listener.local_addr()?;
            let dial = connect.clone().unwrap_or_else(|| local_addr.to_string());
            server_thread = Some(spawn_stream_server(server.clone(), listener, cfg.n_devices));
            for _ in 0..cfg.n_devices {
                links.push(DeviceLink::Stream(proto::stream_transport(dial.as_str())?));
            }
        }
    }

    let mut devices: Vec<DeviceCtx> = links
        .into_iter()
        .enumerate()
        .map(|(i, link)| DeviceCtx {
            id: i as u16,
            link,
            client: ClientRuntime::new(),
            last_acc: 0.0,
        })
        .collect();

    let n_agents = match cfg.agent_mode {
        AgentMode::Shared => 1,
        AgentMode::PerDevice => cfg.n_devices,
    };
    let mut agents: Vec<AgentSlot> = (0..n_agents)
        .map(|i| -> Result<AgentSlot> {
            let qnet = QNetwork::new(
                cfg.state_dim(),
                cfg.n_splits,
                derive_seed(cfg.seed, &[scope::QNET_INIT, i as u64]),
            )?;
            let target = qnet.clone();
            Ok(AgentSlot {
                qnet,
                target,
                buffer: ReplayBuffer::new(
                    cfg.replay_capacity,
                    stream(cfg.seed, &[scope::REPLAY, i as u64]),
                ),
                transitions: 0,
                last_q_loss: None,
            })
        })
        .collect::<Result<_>>()?;

    let schedule = EpsilonSchedule::from_config(&cfg.epsilon, cfg.episodes);
    let run_ctx = RunCtx {
        cfg: cfg.clone(),
        spec,
        catalog,
        dataset,
        shards,
        dynamics: DeviceDynamics::from_config(cfg),
        hyper,
        server: server.clone(),
    };

    let mut records = Vec::with_capacity(cfg.episodes * cfg.steps_per_episode * cfg.n_devices);
    let mut episodes = Vec::with_capacity(cfg.episodes);
    let mut feasible_steps = 0u64;
    let mut transitions_pushed = 0u64;
    let mut reward_sum = 0.0;
    let mut reward_count = 0u64;

    for episode in 0..cfg.episodes {
        let epsilon = schedule.epsilon_at(episode);
        let mut states = init_devices(cfg.n_devices, cfg.capacity_range, cfg.seed, episode as u64);

        let mut split_counts = vec![0u64; cfg.n_splits];
        let mut acc_sum = 0.0;
        let mut acc_count = 0u64;
        let mut straggler_count = 0u64;
        let mut available_steps = 0u64;
        let mut episode_reward_sum = 0.0;
        let mut max_grad_norm = 0.0f64;

        for step in 0..cfg.steps_per_episode {
            server.lock().expect("server lock").begin_round();

            // Device phase. Sequential merges impose vanilla-SL ordering
            // (each pull sees the previous device's push), so devices run
            // serially; averaged mode reads a snapshot, so device work runs
            // in parallel.
            let outcomes: Vec<DeviceOutcome> = if cfg.merge_mode == MergeMode::Averaged {
                let agents_ref = &agents;
                let run_ref = &run_ctx;
                let states_ref = &states;
                devices
                    .par_iter_mut()
                    .map(|ctx| {
                        let qnet = &agents_ref[agent_index(cfg.agent_mode, ctx.id)].qnet;
                        run_ref.device_step(
                            ctx,
                            &states_ref[ctx.id as usize],
                            qnet,
                            episode as u32,
                            step as u32,
                            epsilon,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                let mut out = Vec::with_capacity(cfg.n_devices);
                for ctx in devices.iter_mut() {
                    let qnet = &agents[agent_index(cfg.agent_mode, ctx.id)].qnet;
                    out.push(run_ctx.device_step(
                        ctx,
                        &states[ctx.id as usize],
                        qnet,
                        episode as u32,
                        step as u32,
                        epsilon,
                    )?);
                }
                out
            };

            server.lock().expect("server lock").end_round()?;

            // Buffer pushes and bookkeeping are serialized in device order.
            let mut round_records = Vec::with_capacity(outcomes.len());
            let mut pushes_per_agent = vec![0u64; agents.len()];
            for outcome in outcomes {
                let device = outcome.record.device_id;
                states[device as usize] = outcome.next_state;
                if let Some(t) = outcome.transition {
                    let idx = agent_index(cfg.agent_mode, device);
                    let slot = &mut agents[idx];
                    slot.buffer.push(t);
                    slot.transitions += 1;
                    pushes_per_agent[idx] += 1;
                    transitions_pushed += 1;
                }
                if let Some(norm) = outcome.client_grad_norm {
                    max_grad_norm = max_grad_norm.max(norm);
                }
                let rec = &outcome.record;
                if rec.available {
                    available_steps += 1;
                    if let Some(a) = rec.action {
                        split_counts[a - 1] += 1;
                    }
                    if rec.straggler {
                        straggler_count += 1;
                    }
                    if let Some(a) = rec.acc {
                        acc_sum += a;
                        acc_count += 1;
                    }
                    if let Some(r) = rec.reward {
                        episode_reward_sum += r;
                        reward_sum += r;
                        reward_count += 1;
                    }
                    if rec.feasible == Some(true) {
                        feasible_steps += 1;
                    }
                }
                round_records.push(outcome.record);
            }

            // One DQN step per round per agent once its buffer is warm,
            // then a target sync whenever the transition counter crosses
            // the sync interval.
            for (slot, &pushed) in agents.iter_mut().zip(&pushes_per_agent) {
                slot.last_q_loss = dqn_train_step(
                    &mut slot.qnet,
                    &slot.target,
                    &mut slot.buffer,
                    &hyper,
                    cfg.batch_size,
                    cfg.discount,
                )?;
                if pushed > 0 {
                    let before = slot.transitions - pushed;
                    let interval = cfg.target_sync_every as u64;
                    if before / interval != slot.transitions / interval {
                        sync_target(&slot.qnet, &mut slot.target);
                    }
                }
            }

            for rec in &mut round_records {
                rec.q_loss = agents[agent_index(cfg.agent_mode, rec.device_id)].last_q_loss;
            }
            records.extend(round_records);

            server.lock().expect("server lock").store().assert_finite()?;
        }

        episodes.push(EpisodeStats {
            episode: episode as u32,
            split_counts,
            mean_val_acc: if acc_count > 0 {
                acc_sum / acc_count as f64
            } else {
                0.0
            },
            straggler_rate: if available_steps > 0 {
                straggler_count as f64 / available_steps as f64
            } else {
                0.0
            },
            available_steps,
            mean_reward: if available_steps > 0 {
                episode_reward_sum / available_steps as f64
            } else {
                0.0
            },
            max_client_grad_norm: max_grad_norm,
        });
    }

    let final_metrics = {
        let server = server.lock().expect("server lock");
        evaluate_global(server.store(), &run_ctx.dataset, Split::Test)?
    };

    // Drop stream connections so the server loop unblocks, then join it.
    devices.clear();
    if let Some(t) = server_thread {
        let _ = t.join();
    }

    Ok(RunArtifacts {
        config: cfg.clone(),
        records,
        episodes,
        final_metrics,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        feasible_steps,
        transitions_pushed,
        mean_reward: if reward_count > 0 {
            reward_sum / reward_count as f64
        } else {
            0.0
        },
        qnets: agents.into_iter().map(|slot| slot.qnet).collect(),
    })
}

/// Centralized monolithic baseline: the same data pipeline and architecture
/// trained with `total_steps` AdamW updates on uniformly sampled batches.
pub fn train_centralized_baseline(
    cfg: &ExperimentConfig,
    total_steps: u64,
) -> Result<(Metrics, ParamStore)> {
    cfg.validate()?;
    let (dataset, _, _, mut store, _) = build_pipeline(cfg)?;
    let hyper = AdamWHyper::new(cfg.lr, cfg.weight_decay);
    let train_idx = dataset.indices(Split::Train);
    for step in 0..total_steps {
        let batch_idx = sample_without_replacement(
            &train_idx,
            cfg.batch_size,
            cfg.seed,
            &[scope::BASELINE, step],
        );
        let batch = gather_rows(&dataset.data.features, &batch_idx);
        let labels: Vec<usize> = batch_idx.iter().map(|&i| dataset.data.labels[i]).collect();
        store.train_full_batch(&batch, &labels, &hyper)?;
    }
    let metrics = evaluate_global(&store, &dataset, Split::Test)?;
    Ok((metrics, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::validate_config;

    fn tiny_config() -> ExperimentConfig {
        validate_config(
            r#"
n_devices = 3
episodes = 2
steps_per_episode = 6
batch_size = 8
target_sync_every = 10
[data]
samples = 240
classes = 4
dim = 6
spread = 0.4
"#,
            &[],
        )
        .unwrap()
    }

    #[test]
    fn iid_shards_cover_and_balance() {
        let ds = split_train_val_test(make_blobs(1000, 5, 8, 0.5, 3).unwrap(), 3).unwrap();
        let shards = shard_iid(&ds, 5, 3).unwrap();
        let mut all: Vec<usize> = shards.train.iter().flatten().cloned().collect();
        all.sort_unstable();
        let mut expected = ds.indices(Split::Train);
        expected.sort_unstable();
        assert_eq!(all, expected);
        let sizes: Vec<usize> = shards.train.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

        // Shard class proportions stay near the global 20% per class.
        for shard in &shards.train {
            let mut counts = vec![0.0; 5];
            for &i in shard {
                counts[ds.data.labels[i]] += 1.0;
            }
            for c in counts {
                let frac: f64 = c / shard.len() as f64;
                assert!((frac - 0.2).abs() < 0.05, "class fraction {frac}");
            }
        }
    }

    #[test]
    fn iid_sharding_is_deterministic() {
        let ds = split_train_val_test(make_blobs(300, 3, 4, 0.5, 1).unwrap(), 1).unwrap();
        assert_eq!(shard_iid(&ds, 4, 9).unwrap(), shard_iid(&ds, 4, 9).unwrap());
    }

    #[test]
    fn noniid_shards_limit_classes_per_device() {
        // 4 balanced classes, 2 devices, 2 shards each: label-sorted
        // quarters align with classes, so a device holds at most 2.
        let ds = split_train_val_test(make_blobs(400, 4, 4, 0.3, 2).unwrap(), 2).unwrap();
        let shards = shard_noniid(&ds, 2, 2, 2).unwrap();
        for device in &shards.train {
            let mut classes: Vec<usize> = device.iter().map(|&i| ds.data.labels[i]).collect();
            classes.sort_unstable();
            classes.dedup();
            assert!(classes.len() <= 2, "device classes {classes:?}");
        }
        let mut all: Vec<usize> = shards.train.iter().flatten().cloned().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(n, ds.indices(Split::Train).len());
    }

    #[test]
    fn noniid_single_device_holds_everything() {
        let ds = split_train_val_test(make_blobs(200, 4, 4, 0.3, 5).unwrap(), 5).unwrap();
        let shards = shard_noniid(&ds, 1, 3, 5).unwrap();
        assert_eq!(shards.train[0].len(), ds.indices(Split::Train).len());
    }

    #[test]
    fn noniid_rejects_too_few_samples() {
        let ds = split_train_val_test(make_blobs(30, 2, 4, 0.3, 5).unwrap(), 5).unwrap();
        assert!(shard_noniid(&ds, 30, 2, 5).is_err());
    }

    #[test]
    fn tiny_run_accounting_holds() {
        let cfg = tiny_config();
        let artifacts = run_training(&cfg, &TransportConfig::Loopback).unwrap();

        // One row per device per round, available or not.
        assert_eq!(
            artifacts.records.len(),
            cfg.episodes * cfg.steps_per_episode * cfg.n_devices
        );
        // Split counts per episode sum to available device-steps.
        for ep in &artifacts.episodes {
            let counted: u64 = ep.split_counts.iter().sum();
            assert_eq!(counted, ep.available_steps);
        }
        // Every available row pushed exactly one transition.
        let available_rows = artifacts.records.iter().filter(|r| r.available).count() as u64;
        assert_eq!(artifacts.transitions_pushed, available_rows);
        for r in &artifacts.records {
            assert_eq!(r.straggler, r.available && r.feasible == Some(false));
            if r.available {
                let a = r.action.unwrap();
                assert!((1..=cfg.n_splits).contains(&a));
                // Strict mode: infeasible rows log no accuracy and pay the
                // flat penalty.
                if r.feasible == Some(false) {
                    assert!(r.acc.is_none());
                    assert_eq!(r.reward, Some(-1.0));
                }
            } else {
                assert!(r.action.is_none());
                assert!(r.reward.is_none());
            }
        }
    }

    #[test]
    fn same_seed_reproduces_artifacts() {
        let cfg = tiny_config();
        let a = run_training(&cfg, &TransportConfig::Loopback).unwrap();
        let b = run_training(&cfg, &TransportConfig::Loopback).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.episodes, b.episodes);
        assert_eq!(a.final_metrics, b.final_metrics);

        let mut cfg2 = cfg.clone();
        cfg2.seed = 43;
        let c = run_training(&cfg2, &TransportConfig::Loopback).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn averaged_mode_reproduces_under_parallel_execution() {
        let mut cfg = tiny_config();
        cfg.merge_mode = MergeMode::Averaged;
        let a = run_training(&cfg, &TransportConfig::Loopback).unwrap();
        let b = run_training(&cfg, &TransportConfig::Loopback).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_metrics, b.final_metrics);
    }

    #[test]
    fn stream_transport_matches_loopback() {
        let cfg = tiny_config();
        let loopback = run_training(&cfg, &TransportConfig::Loopback).unwrap();
        let stream = run_training(
            &cfg,
            &TransportConfig::Stream {
                listen: "127.0.0.1:0".into(),
                connect: None,
            },
        )
        .unwrap();
        assert_eq!(loopback.records, stream.records);
        assert_eq!(loopback.final_metrics, stream.final_metrics);
    }

    #[test]
    fn per_device_agents_run() {
        let mut cfg = tiny_config();
        cfg.agent_mode = AgentMode::PerDevice;
        let a = run_training(&cfg, &TransportConfig::Loopback).unwrap();
        let b = run_training(&cfg, &TransportConfig::Loopback).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn baseline_trains_to_high_accuracy() {
        let cfg = tiny_config();
        let (metrics, _) = train_centralized_baseline(&cfg, 200).unwrap();
        assert!(
            metrics.accuracy > 0.8,
            "baseline accuracy {}",
            metrics.accuracy
        );
    }

    #[test]
    fn target_sync_cadence_changes_learning() {
        // Per-round syncs vs effectively never: the Bellman targets differ,
        // so the logged q-losses must diverge.
        let mut fast = tiny_config();
        fast.target_sync_every = 1;
        let mut slow = fast.clone();
        slow.target_sync_every = 100_000;
        let a = run_training(&fast, &TransportConfig::Loopback).unwrap();
        let b = run_training(&slow, &TransportConfig::Loopback).unwrap();
        let losses = |r: &RunArtifacts| -> Vec<Option<f64>> {
            r.records.iter().map(|x| x.q_loss).collect()
        };
        assert_ne!(losses(&a), losses(&b));
    }

    #[test]
    fn zero_final_layer_predicts_like_a_uniform_guesser() {
        // All-equal logits argmax to class 0, so accuracy on balanced data
        // sits near 1/C.
        let cfg = ExperimentConfig::default();
        let data = make_blobs(
            cfg.data.samples,
            cfg.data.classes,
            cfg.data.dim,
            cfg.data.spread,
            cfg.seed,
        )
        .unwrap();
        let tagged = split_train_val_test(data, cfg.seed).unwrap();
        let spec = default_network_spec(cfg.data.dim, cfg.data.classes);
        let mut store = build_network(&spec, 1).unwrap();
        let last = spec.depth() - 1;
        store.layers_mut()[last].w.fill(0.0);
        store.layers_mut()[last].b.fill(0.0);
        let metrics = evaluate_global(&store, &tagged, Split::Test).unwrap();
        assert!(
            (metrics.accuracy - 1.0 / cfg.data.classes as f64).abs() < 0.05,
            "uniform predictor accuracy {}",
            metrics.accuracy
        );
    }
}
