//! Experiment configuration: schema, defaults, file parsing, CLI overrides.
//!
//! Configs load from a single TOML document. Every field has a default, so an
//! empty document is the default experiment; unknown keys are rejected with
//! the offending key named.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ε-greedy decay shape across episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayShape {
    Exponential,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonConfig {
    pub start: f64,
    pub end: f64,
    pub decay: DecayShape,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            decay: DecayShape::Exponential,
        }
    }
}

/// Strict mode skips execution of infeasible picks and pays a flat penalty;
/// soft mode always executes and charges the resource/time deficit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Strict,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_pen: f64,
    pub penalty_magnitude: f64,
    pub mode: RewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma_pen: 1.0,
            penalty_magnitude: 1.0,
            mode: RewardMode::Strict,
        }
    }
}

/// One policy network shared by all devices, or one per device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentMode {
    Shared,
    PerDevice,
}

/// How per-device segment updates land in the canonical store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Sequential,
    Averaged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub spread: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            dim: 8,
            samples: 1000,
            spread: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistributionConfig {
    pub kind: DistributionKind,
    pub shards_per_client: usize,
}

impl Default for DistributionConfig {
    fn default() -> Self {
        Self {
            kind: DistributionKind::Iid,
            shards_per_client: 2,
        }
    }
}

/// Explicit per-split cost override; replaces the linear FLOP-derived cost
/// map. `load_fraction` falls back to the computed value when absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostEntry {
    pub r_req: f64,
    pub t_req: f64,
    #[serde(default)]
    pub load_fraction: Option<f64>,
}

/// Fully-resolved, range-checked experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_devices: usize,
    pub n_splits: usize,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub capacity_range: [f64; 2],
    pub unavailability_prob: f64,
    pub drift_sigma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub discount: f64,
    pub batch_size: usize,
    pub target_sync_every: usize,
    pub replay_capacity: usize,
    pub epsilon: EpsilonConfig,
    pub reward: RewardConfig,
    pub agent_mode: AgentMode,
    pub merge_mode: MergeMode,
    /// Adds the last observed validation accuracy as a third state feature.
    pub state_includes_perf: bool,
    pub seed: u64,
    pub data: DataConfig,
    pub distribution: DistributionConfig,
    /// When present, must hold exactly `n_splits` entries.
    pub cost_table: Option<Vec<CostEntry>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_devices: 5,
            n_splits: 5,
            episodes: 50,
            steps_per_episode: 75,
            capacity_range: [0.5, 7.5],
            unavailability_prob: 0.10,
            drift_sigma: 0.25,
            lr: 1e-3,
            weight_decay: 1e-5,
            discount: 0.95,
            batch_size: 32,
            target_sync_every: 500,
            replay_capacity: 10_000,
            epsilon: EpsilonConfig::default(),
            reward: RewardConfig::default(),
            agent_mode: AgentMode::Shared,
            merge_mode: MergeMode::Sequential,
            state_includes_perf: false,
            seed: 42,
            data: DataConfig::default(),
            distribution: DistributionConfig::default(),
            cost_table: None,
        }
    }
}

impl ExperimentConfig {
    /// Range-check every field; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        fn bad(field: &str, detail: String) -> Error {
            Error::Config(format!("{field}: {detail}"))
        }
        if self.n_devices == 0 {
            return Err(bad("n_devices", "must be at least 1".into()));
        }
        if self.n_splits < 2 {
            return Err(bad("n_splits", "must be at least 2".into()));
        }
        if self.n_splits > 255 {
            return Err(bad("n_splits", "must fit the wire format (at most 255)".into()));
        }
        if self.episodes == 0 || self.steps_per_episode == 0 {
            return Err(bad("episodes/steps_per_episode", "must be at least 1".into()));
        }
        let [low, high] = self.capacity_range;
        if !(low.is_finite() && high.is_finite()) {
            return Err(bad("capacity_range", "must be finite".into()));
        }
        if low >= high {
            return Err(bad("capacity_range", format!("low >= high ({low} >= {high})")));
        }
        if low <= 0.0 {
            return Err(bad("capacity_range", "low must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.unavailability_prob) {
            return Err(bad(
                "unavailability_prob",
                format!("must lie in [0, 1), got {}", self.unavailability_prob),
            ));
        }
        if !self.drift_sigma.is_finite() || self.drift_sigma < 0.0 {
            return Err(bad("drift_sigma", "must be nonnegative".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(bad("lr", format!("must be positive, got {}", self.lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(bad("weight_decay", "must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(bad("discount", format!("must lie in [0, 1], got {}", self.discount)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1".into()));
        }
        if self.target_sync_every == 0 {
            return Err(bad("target_sync_every", "must be at least 1".into()));
        }
        if self.replay_capacity == 0 {
            return Err(bad("replay_capacity", "must be at least 1".into()));
        }
        let eps = &self.epsilon;
        if !(0.0..=1.0).contains(&eps.start) || !(0.0..=1.0).contains(&eps.end) {
            return Err(bad("epsilon", "start and end must lie in [0, 1]".into()));
        }
        if eps.end > eps.start {
            return Err(bad("epsilon", format!("end > start ({} > {})", eps.end, eps.start)));
        }
        let w = &self.reward;
        for (name, v) in [
            ("reward.alpha", w.alpha),
            ("reward.beta", w.beta),
            ("reward.gamma_pen", w.gamma_pen),
            ("reward.penalty_magnitude", w.penalty_magnitude),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(bad(name, format!("must be nonnegative, got {v}")));
            }
        }
        if self.data.classes < 2 {
            return Err(bad("data.classes", "must be at least 2".into()));
        }
        if self.data.dim < 2 {
            return Err(bad("data.dim", "must be at least 2".into()));
        }
        if self.data.samples < 20 {
            return Err(bad("data.samples", "must be at least 20".into()));
        }
        if self.data.samples < self.data.classes {
            return Err(bad("data.samples", "fewer samples than classes".into()));
        }
        if !self.data.spread.is_finite() || self.data.spread < 0.0 {
            return Err(bad("data.spread", "must be nonnegative".into()));
        }
        if self.distribution.shards_per_client == 0 {
            return Err(bad("distribution.shards_per_client", "must be at least 1".into()));
        }
        if let Some(table) = &self.cost_table {
            if table.len() != self.n_splits {
                return Err(bad(
                    "cost_table",
                    format!("needs {} entries, got {}", self.n_splits, table.len()),
                ));
            }
            for (i, e) in table.iter().enumerate() {
                if !(e.r_req.is_finite() && e.t_req.is_finite()) {
                    return Err(bad("cost_table", format!("entry {i} not finite")));
                }
                if let Some(f) = e.load_fraction {
                    if !(0.0..=1.0).contains(&f) {
                        return Err(bad(
                            "cost_table",
                            format!("entry {i} load_fraction outside [0, 1]"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Q-network input width: normalized capacity and time window, plus the
    /// optional performance feature.
    pub fn state_dim(&self) -> usize {
        if self.state_includes_perf {
            3
        } else {
            2
        }
    }

    /// Stable 64-bit hash of the resolved config, used for sweep dedup and
    /// run-directory naming.
    pub fn config_hash(&self) -> u64 {
        let text = toml::to_string(self).expect("config serializes");
        // FNV-1a; stable across builds, unlike the std hasher.
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in text.bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100_0000_01b3);
        }
        hash
    }
}

/// Parse `key=value` override pairs of dotted TOML paths, e.g.
/// `reward.alpha=2.0` or `capacity_range=[1.0, 4.0]`.
fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not KEY=VALUE")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::Config(format!("override '{spec}' has an empty key")));
    }
    let parsed: toml::Value = format!("v = {}", raw_value.trim())
        .parse::<toml::Table>()
        .or_else(|_| format!("v = \"{}\"", raw_value.trim()).parse::<toml::Table>())
        .map_err(|e| Error::Config(format!("override '{spec}': bad value ({e})")))?
        .remove("v")
        .expect("parsed override table has v");

    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{spec}': '{part}' is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{spec}': parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parse and range-check a TOML config document, applying `KEY=VALUE`
/// overrides on top. Unknown keys are rejected by name.
pub fn validate_config(raw: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: toml::Value = raw
        .parse()
        .map_err(|e| Error::Config(format!("not valid TOML: {e}")))?;
    if !doc.is_table() {
        return Err(Error::Config("config root must be a table".into()));
    }
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    let cfg: ExperimentConfig = doc
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_experiment_protocol() {
        let cfg = validate_config("", &[]).unwrap();
        assert_eq!(cfg.n_devices, 5);
        assert_eq!(cfg.n_splits, 5);
        assert_eq!(cfg.episodes, 50);
        assert_eq!(cfg.steps_per_episode, 75);
        assert_eq!(cfg.capacity_range, [0.5, 7.5]);
        assert_eq!(cfg.unavailability_prob, 0.10);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.target_sync_every, 500);
    }

    #[test]
    fn rejects_out_of_range_probability() {
        let err = validate_config("unavailability_prob = 1.5", &[]).unwrap_err();
        assert!(err.to_string().contains("unavailability_prob"));
    }

    #[test]
    fn rejects_inverted_capacity_range() {
        let err = validate_config("capacity_range = [7.5, 0.5]", &[]).unwrap_err();
        assert!(err.to_string().contains("low >= high"));
    }

    #[test]
    fn rejects_unknown_keys_by_name() {
        let err = validate_config("frobnication = 3", &[]).unwrap_err();
        assert!(err.to_string().contains("frobnication"), "{err}");
        let err = validate_config("[reward]\nalhpa = 1.0", &[]).unwrap_err();
        assert!(err.to_string().contains("alhpa"), "{err}");
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = validate_config(
            "lr = 0.01",
            &["lr=0.002".into(), "reward.alpha=2.5".into(), "seed=7".into()],
        )
        .unwrap();
        assert_eq!(cfg.lr, 0.002);
        assert_eq!(cfg.reward.alpha, 2.5);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn override_accepts_arrays_and_strings() {
        let cfg = validate_config(
            "",
            &[
                "capacity_range=[1.0, 4.0]".into(),
                "merge_mode=averaged".into(),
                "agent_mode=per-device".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.capacity_range, [1.0, 4.0]);
        assert_eq!(cfg.merge_mode, MergeMode::Averaged);
        assert_eq!(cfg.agent_mode, AgentMode::PerDevice);
    }

    #[test]
    fn cost_table_length_checked() {
        let doc = r#"
n_splits = 3
cost_table = [
  { r_req = 1.0, t_req = 1.0 },
  { r_req = 2.0, t_req = 2.0 },
]
"#;
        let err = validate_config(doc, &[]).unwrap_err();
        assert!(err.to_string().contains("cost_table"));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = validate_config("", &[]).unwrap();
        let b = validate_config("", &[]).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let c = validate_config("seed = 43", &[]).unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn epsilon_order_enforced() {
        let err = validate_config("[epsilon]\nstart = 0.01\nend = 0.5", &[]).unwrap_err();
        assert!(err.to_string().contains("epsilon"));
    }
}
