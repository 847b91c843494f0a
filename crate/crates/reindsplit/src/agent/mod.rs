//! Q-learning machinery: a small fully-connected Q-network with replay
//! buffer and target network, plus tabular oracles in [`tabular`].

pub mod tabular;

pub use tabular::{greedy_policy, tabular_q_learning, value_iteration, LrSchedule, TabularMdp};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DecayShape, EpsilonConfig};
use crate::error::{Error, Result};
use crate::splitnet::{
    adamw_step, backward_segment, forward_segment, AdamWHyper, build_network, NetworkSpec,
    ParamStore,
};

/// Two-layer Q-network: affine(state_dim -> 128) + ReLU + affine(128 -> K).
/// States are normalized before they get here.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    store: ParamStore,
    state_dim: usize,
    n_actions: usize,
}

pub const Q_HIDDEN: usize = 128;

impl QNetwork {
    pub fn new(state_dim: usize, n_actions: usize, seed: u64) -> Result<Self> {
        if !(2..=3).contains(&state_dim) {
            return Err(Error::Config(format!(
                "q-network state dim must be 2 or 3, got {state_dim}"
            )));
        }
        if n_actions == 0 {
            return Err(Error::Config("q-network needs at least one action".into()));
        }
        let spec = NetworkSpec::chain(&[state_dim, Q_HIDDEN, n_actions])?;
        Ok(Self {
            store: build_network(&spec, seed)?,
            state_dim,
            n_actions,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Q-values for one state, one per action.
    pub fn q_forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(Error::Shape(format!(
                "state dim {} does not match network input {}",
                state.len(),
                self.state_dim
            )));
        }
        let batch = Array2::from_shape_vec((1, self.state_dim), state.to_vec())
            .expect("1-row state matrix");
        let out = self.store.forward_full(&batch)?;
        Ok(out.row(0).to_vec())
    }

    /// Batched evaluation; row i holds the Q-values for state i.
    pub fn q_forward_batch(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        self.store.forward_full(states)
    }
}

/// Copy online parameters into the target network, byte-identical.
pub fn sync_target(qnet: &QNetwork, target: &mut QNetwork) {
    target.store = qnet.store.clone();
}

/// ε-greedy selection over 1-based split actions: uniform with probability
/// ε, otherwise argmax with the lowest index winning ties.
pub fn select_action(q_values: &[f64], epsilon: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    if q_values.is_empty() {
        return Err(Error::Shape("empty q-value vector".into()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let k = q_values.len();
    if rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..k) + 1);
    }
    let mut best = 0usize;
    for (i, &q) in q_values.iter().enumerate() {
        if q > q_values[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// One (s, a, r, s') step. Actions are 1-based split indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Bounded ring buffer with a dedicated uniform sampler stream.
#[derive(Debug)]
pub struct ReplayBuffer {
    buf: Vec<Transition>,
    capacity: usize,
    head: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        Self {
            buf: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            head: 0,
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() < self.capacity {
            self.buf.push(t);
        } else {
            self.buf[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Uniform sample with replacement; `None` until the buffer holds at
    /// least `n` transitions.
    pub fn sample(&mut self, n: usize) -> Option<Vec<Transition>> {
        if self.buf.len() < n {
            return None;
        }
        Some(
            (0..n)
                .map(|_| self.buf[self.rng.gen_range(0..self.buf.len())].clone())
                .collect(),
        )
    }
}

/// Bellman targets `y = r + δ max_a' Q_target(s', a')`; terminal
/// transitions use `y = r`.
pub fn bellman_targets(
    batch: &[Transition],
    target: &QNetwork,
    discount: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Shape("empty transition batch".into()));
    }
    let mut targets = Vec::with_capacity(batch.len());
    for t in batch {
        if !t.reward.is_finite() {
            return Err(Error::NonFinite("transition reward".into()));
        }
        if t.terminal {
            targets.push(t.reward);
        } else {
            let q_next = target.q_forward(&t.next_state)?;
            let max = q_next.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            targets.push(t.reward + discount * max);
        }
    }
    Ok(targets)
}

/// One DQN update: mean squared error between the Bellman targets and
/// `Q(s, a)` over a sampled batch, followed by a single AdamW step on the
/// online network only. Returns the pre-step loss, or `None` when the
/// buffer cannot fill a batch yet.
pub fn dqn_train_step(
    qnet: &mut QNetwork,
    target: &QNetwork,
    buffer: &mut ReplayBuffer,
    hyper: &AdamWHyper,
    batch_size: usize,
    discount: f64,
) -> Result<Option<f64>> {
    let Some(batch) = buffer.sample(batch_size) else {
        return Ok(None);
    };
    let targets = bellman_targets(&batch, target, discount)?;

    let n = batch.len();
    let state_dim = qnet.state_dim;
    let mut states = Array2::zeros((n, state_dim));
    for (i, t) in batch.iter().enumerate() {
        if t.state.len() != state_dim {
            return Err(Error::Shape("transition state dim mismatch".into()));
        }
        for d in 0..state_dim {
            states[[i, d]] = t.state[d];
        }
    }

    let spec = qnet.store.spec().clone();
    let trace = forward_segment(&spec.layers, qnet.store.layers(), &states)?;
    let q_all = &trace.output;

    let mut loss = 0.0;
    let mut dlogits = Array2::zeros(q_all.dim());
    let inv_n = 1.0 / n as f64;
    for (i, t) in batch.iter().enumerate() {
        if t.action == 0 || t.action > qnet.n_actions {
            return Err(Error::Shape(format!(
                "action {} outside [1, {}]",
                t.action, qnet.n_actions
            )));
        }
        let a = t.action - 1;
        let err = q_all[[i, a]] - targets[i];
        loss += err * err * inv_n;
        dlogits[[i, a]] = 2.0 * err * inv_n;
    }

    let (grads, _) = backward_segment(&spec.layers, qnet.store.layers(), &trace, &dlogits);
    adamw_step(qnet.store.layers_mut(), &grads, hyper)?;
    Ok(Some(loss))
}

/// ε decay across episodes; start at episode 0, hit `end` at the final
/// episode, monotone in between.
#[derive(Debug, Clone, Copy)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub episodes: usize,
    pub shape: DecayShape,
}

impl EpsilonSchedule {
    pub fn from_config(cfg: &EpsilonConfig, episodes: usize) -> Self {
        Self {
            start: cfg.start,
            end: cfg.end,
            episodes,
            shape: cfg.decay,
        }
    }

    pub fn epsilon_at(&self, episode: usize) -> f64 {
        if self.episodes <= 1 || self.start == self.end {
            return if episode == 0 { self.start } else { self.end };
        }
        let last = (self.episodes - 1) as f64;
        let t = (episode as f64).min(last) / last;
        match self.shape {
            DecayShape::Exponential => {
                if self.end == 0.0 {
                    // No finite exponential rate reaches zero; fall back to
                    // linear for the degenerate target.
                    self.start + (self.end - self.start) * t
                } else {
                    self.start * (self.end / self.start).powf(t)
                }
            }
            DecayShape::Linear => self.start + (self.end - self.start) * t,
        }
    }
}

/// Normalize a raw device observation for the Q-network: capacity and time
/// window divided by the top of the capacity range, plus the optional
/// performance feature.
pub fn normalize_state(r_t: f64, t_t: f64, perf: Option<f64>, capacity_high: f64) -> Vec<f64> {
    let mut s = vec![r_t / capacity_high, t_t / capacity_high];
    if let Some(p) = perf {
        s.push(p);
    }
    s
}

/// Hand-rolled two-matrix evaluation used as an independent oracle for
/// `q_forward` in tests and the verification suite. Accumulates each dot
/// product over the input index in ascending order and adds the bias last,
/// the same arithmetic order the network uses, so agreement is exact.
pub fn q_reference_eval(qnet: &QNetwork, state: &[f64]) -> Vec<f64> {
    let layers = qnet.store.layers();
    let w1 = &layers[0].w;
    let b1 = &layers[0].b;
    let w2 = &layers[1].w;
    let b2 = &layers[1].b;
    let mut hidden = Array1::zeros(w1.ncols());
    for j in 0..w1.ncols() {
        let mut acc = 0.0;
        for (i, &x) in state.iter().enumerate() {
            acc += x * w1[[i, j]];
        }
        let z = acc + b1[j];
        hidden[j] = if z > 0.0 { z } else { 0.0 };
    }
    let mut out = vec![0.0; w2.ncols()];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..w2.nrows() {
            acc += hidden[i] * w2[[i, j]];
        }
        *o = acc + b2[j];
    }
    out
}
