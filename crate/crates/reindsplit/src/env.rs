//! Heterogeneous-device simulation: stochastic capacity/time dynamics,
//! availability, feasibility sets, and the reward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ExperimentConfig, RewardConfig, RewardMode};
use crate::error::{Error, Result};
use crate::rng::{scope, stream};
use crate::splitnet::SplitCatalog;

/// Per-round view of one device: compute capacity, time window,
/// availability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceState {
    pub device_id: u16,
    pub r_t: f64,
    pub t_t: f64,
    pub available: bool,
}

/// Stochastic state dynamics shared by all devices.
#[derive(Debug, Clone, Copy)]
pub struct DeviceDynamics {
    pub capacity_range: [f64; 2],
    pub drift_sigma: f64,
    pub unavailability_prob: f64,
}

impl DeviceDynamics {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            capacity_range: cfg.capacity_range,
            drift_sigma: cfg.drift_sigma,
            unavailability_prob: cfg.unavailability_prob,
        }
    }

    /// Additive Gaussian drift on capacity and time, clamped to the range;
    /// availability re-rolled independently each round.
    pub fn step(&self, state: &DeviceState, rng: &mut ChaCha8Rng) -> DeviceState {
        let [low, high] = self.capacity_range;
        let noise = Normal::new(0.0, self.drift_sigma.max(0.0)).expect("valid sigma");
        let r_t = (state.r_t + noise.sample(rng)).clamp(low, high);
        let t_t = (state.t_t + noise.sample(rng)).clamp(low, high);
        let available = rng.gen::<f64>() >= self.unavailability_prob;
        DeviceState {
            device_id: state.device_id,
            r_t,
            t_t,
            available,
        }
    }
}

/// Fresh device states for an episode: capacity and time drawn uniformly
/// and independently from the range, all devices initially available.
/// Each device draws from its own stream, so results are independent of
/// iteration order.
pub fn init_devices(
    n_devices: usize,
    capacity_range: [f64; 2],
    seed: u64,
    episode: u64,
) -> Vec<DeviceState> {
    let [low, high] = capacity_range;
    (0..n_devices)
        .map(|d| {
            let mut rng = stream(seed, &[scope::DEVICE_INIT, episode, d as u64]);
            DeviceState {
                device_id: d as u16,
                r_t: low + (high - low) * rng.gen::<f64>(),
                t_t: low + (high - low) * rng.gen::<f64>(),
                available: true,
            }
        })
        .collect()
}

/// Per-split resource and time surpluses for one device, and the resulting
/// feasibility set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// `(delta_r, delta_t)` for split k at index k-1.
    pub deltas: Vec<(f64, f64)>,
}

impl FeasibilityReport {
    pub fn feasible(&self, split: usize) -> bool {
        self.deltas
            .get(split - 1)
            .map(|&(dr, dt)| dr >= 0.0 && dt >= 0.0)
            .unwrap_or(false)
    }

    /// The feasibility set as 1-based split indices; possibly empty.
    pub fn feasibility_set(&self) -> Vec<usize> {
        (1..=self.deltas.len())
            .filter(|&k| self.feasible(k))
            .collect()
    }

    pub fn deficit(&self, split: usize) -> f64 {
        let (dr, dt) = self.deltas[split - 1];
        (-dr).max(0.0) + (-dt).max(0.0)
    }
}

/// Surpluses of an available device against every catalog entry. Callers
/// must skip unavailable devices.
pub fn feasibility(state: &DeviceState, catalog: &SplitCatalog) -> Result<FeasibilityReport> {
    if !state.available {
        return Err(Error::Runtime(format!(
            "feasibility of unavailable device {}",
            state.device_id
        )));
    }
    let deltas = catalog
        .entries()
        .iter()
        .map(|e| (state.r_t - e.r_req, state.t_t - e.t_req))
        .collect();
    Ok(FeasibilityReport { deltas })
}

/// Reward for taking `split` given the feasibility report.
///
/// Strict mode: a feasible pick earns `alpha * acc` minus `beta` times the
/// (identically zero) deficit; an infeasible pick earns
/// `-gamma_pen * penalty_magnitude` and no training occurs. Soft mode
/// executes regardless and always charges the live deficit term.
pub fn compute_reward(
    acc: f64,
    report: &FeasibilityReport,
    split: usize,
    weights: &RewardConfig,
) -> f64 {
    let feasible = report.feasible(split);
    match weights.mode {
        RewardMode::Strict => {
            if feasible {
                weights.alpha * acc - weights.beta * report.deficit(split)
            } else {
                -weights.gamma_pen * weights.penalty_magnitude
            }
        }
        RewardMode::Soft => weights.alpha * acc - weights.beta * report.deficit(split),
    }
}

/// Fraction of model compute the client runs under `split`.
pub fn client_load(catalog: &SplitCatalog, split: usize) -> Result<f64> {
    catalog.client_load(split)
}
