//! Exact tabular oracles: value iteration and tabular Q-learning on an
//! explicit finite MDP. These pin down what the function-approximating
//! agent should converge to.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{scope, stream};

use super::EpsilonSchedule;

/// Explicit finite MDP: `transitions[s][a][s']` is the probability of
/// landing in `s'`, `rewards[s][a]` the expected immediate reward.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
    pub discount: f64,
}

impl TabularMdp {
    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.first().map_or(0, |s| s.len())
    }

    pub fn validate(&self) -> Result<()> {
        let (s_n, a_n) = (self.n_states(), self.n_actions());
        if s_n == 0 || a_n == 0 {
            return Err(Error::Config("MDP needs states and actions".into()));
        }
        if self.rewards.len() != s_n || self.rewards.iter().any(|r| r.len() != a_n) {
            return Err(Error::Config("reward table shape mismatch".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Config(format!("discount {} outside [0, 1]", self.discount)));
        }
        for (s, row) in self.transitions.iter().enumerate() {
            if row.len() != a_n {
                return Err(Error::Config(format!("state {s} has wrong action count")));
            }
            for (a, probs) in row.iter().enumerate() {
                if probs.len() != s_n {
                    return Err(Error::Config(format!("P(.|{s},{a}) has wrong length")));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-12 || probs.iter().any(|&p| p < 0.0) {
                    return Err(Error::Config(format!(
                        "P(.|{s},{a}) is not a distribution (sums to {total})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn sample_next(&self, s: usize, a: usize, rng: &mut rand_chacha::ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (s_next, &p) in self.transitions[s][a].iter().enumerate() {
            acc += p;
            if u < acc {
                return s_next;
            }
        }
        self.n_states() - 1
    }
}

/// Sup-norm-converged optimal values and the greedy policy (lowest index
/// wins ties). Rejects discount 1, which value iteration cannot handle.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    mdp.validate()?;
    if mdp.discount >= 1.0 {
        return Err(Error::Config("value iteration needs discount < 1".into()));
    }
    let (s_n, a_n) = (mdp.n_states(), mdp.n_actions());
    let mut values = vec![0.0; s_n];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; s_n];
        let mut delta = 0.0f64;
        for s in 0..s_n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..a_n {
                let future: f64 = mdp.transitions[s][a]
                    .iter()
                    .zip(&values)
                    .map(|(&p, &v)| p * v)
                    .sum();
                best = best.max(mdp.rewards[s][a] + mdp.discount * future);
            }
            next[s] = best;
            delta = delta.max((next[s] - values[s]).abs());
        }
        values = next;
        if delta < tol {
            break;
        }
    }
    let policy = (0..s_n)
        .map(|s| {
            let mut best_a = 0;
            let mut best_q = f64::NEG_INFINITY;
            for a in 0..a_n {
                let future: f64 = mdp.transitions[s][a]
                    .iter()
                    .zip(&values)
                    .map(|(&p, &v)| p * v)
                    .sum();
                let q = mdp.rewards[s][a] + mdp.discount * future;
                if q > best_q {
                    best_q = q;
                    best_a = a;
                }
            }
            best_a
        })
        .collect();
    Ok((values, policy))
}

/// Per-(state, action) visit-count learning rate: `base / (1 + decay * n)`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub visit_decay: f64,
}

impl LrSchedule {
    fn at(&self, visits: u64) -> f64 {
        self.base / (1.0 + self.visit_decay * visits as f64)
    }
}

/// Tabular Q-learning over `episodes x steps_per_episode` simulated steps
/// with ε-greedy behavior. Returns the Q table (states x actions).
pub fn tabular_q_learning(
    mdp: &TabularMdp,
    episodes: usize,
    steps_per_episode: usize,
    lr: LrSchedule,
    epsilon: &EpsilonSchedule,
    seed: u64,
) -> Result<Array2<f64>> {
    mdp.validate()?;
    let (s_n, a_n) = (mdp.n_states(), mdp.n_actions());
    let mut q = Array2::zeros((s_n, a_n));
    let mut visits = Array2::<u64>::zeros((s_n, a_n));
    let mut rng = stream(seed, &[scope::ACTION, 0x7AB]);

    for episode in 0..episodes {
        let eps = epsilon.epsilon_at(episode);
        let mut s = rng.gen_range(0..s_n);
        for _ in 0..steps_per_episode {
            let a = if rng.gen::<f64>() < eps {
                rng.gen_range(0..a_n)
            } else {
                let mut best = 0usize;
                for cand in 1..a_n {
                    if q[[s, cand]] > q[[s, best]] {
                        best = cand;
                    }
                }
                best
            };
            let s_next = mdp.sample_next(s, a, &mut rng);
            let r = mdp.rewards[s][a];
            let max_next = (0..a_n)
                .map(|an| q[[s_next, an]])
                .fold(f64::NEG_INFINITY, f64::max);
            let alpha = lr.at(visits[[s, a]]);
            visits[[s, a]] += 1;
            q[[s, a]] += alpha * (r + mdp.discount * max_next - q[[s, a]]);
            s = s_next;
        }
    }
    Ok(q)
}

/// Greedy policy extraction with lowest-index tie-break.
pub fn greedy_policy(q: &Array2<f64>) -> Vec<usize> {
    (0..q.nrows())
        .map(|s| {
            let mut best = 0usize;
            for a in 1..q.ncols() {
                if q[[s, a]] > q[[s, best]] {
                    best = a;
                }
            }
            best
        })
        .collect()
}
