//! Deterministic hyperparameter grid sweeps.
//!
//! A grid file is TOML with an optional `[base]` table of config overrides
//! and a `[grid]` table of axis lists over lr, weight_decay, discount,
//! batch_size, and target_sync_every. Trials run the full training loop on
//! the loopback transport; duplicate grid points collapse by config hash
//! and rows sort by final accuracy.

use serde::Deserialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{run_training, TransportConfig};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Overrides applied to the base config before the grid expands.
    #[serde(default)]
    pub base: Option<toml::Table>,
    #[serde(default)]
    pub grid: GridAxes,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(default)]
    pub lr: Vec<f64>,
    #[serde(default)]
    pub weight_decay: Vec<f64>,
    #[serde(default)]
    pub discount: Vec<f64>,
    #[serde(default)]
    pub batch_size: Vec<usize>,
    #[serde(default)]
    pub target_sync_every: Vec<usize>,
}

/// One completed trial.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub config_hash: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub discount: f64,
    pub batch_size: usize,
    pub target_sync_every: usize,
    pub final_accuracy: f64,
    pub mean_reward: f64,
    pub straggler_rate: f64,
}

pub const SWEEP_HEADER: &str = "config_hash,lr,weight_decay,discount,batch_size,target_sync_every,final_accuracy,mean_reward,straggler_rate";

pub fn parse_grid(text: &str) -> Result<GridSpec> {
    toml::from_str(text).map_err(|e| Error::Config(format!("grid spec: {e}")))
}

fn apply_base(cfg: &ExperimentConfig, base: &Option<toml::Table>) -> Result<ExperimentConfig> {
    let Some(table) = base else {
        return Ok(cfg.clone());
    };
    let mut doc = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let root = doc.as_table_mut().expect("config serializes to a table");
    for (k, v) in table {
        root.insert(k.clone(), v.clone());
    }
    let merged: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| {
        Error::Config(format!("grid base overrides: {e}"))
    })?;
    merged.validate()?;
    Ok(merged)
}

/// Expand the grid into configs. Axes with no values keep the base value;
/// an entirely empty grid is an error.
pub fn expand_grid(base: &ExperimentConfig, spec: &GridSpec) -> Result<Vec<ExperimentConfig>> {
    let base = apply_base(base, &spec.base)?;
    let g = &spec.grid;
    if g.lr.is_empty()
        && g.weight_decay.is_empty()
        && g.discount.is_empty()
        && g.batch_size.is_empty()
        && g.target_sync_every.is_empty()
    {
        return Err(Error::Config(
            "grid is empty: give at least one axis a value list".into(),
        ));
    }
    let or_base = |axis: &[f64], fallback: f64| -> Vec<f64> {
        if axis.is_empty() {
            vec![fallback]
        } else {
            axis.to_vec()
        }
    };
    let lrs = or_base(&g.lr, base.lr);
    let wds = or_base(&g.weight_decay, base.weight_decay);
    let discounts = or_base(&g.discount, base.discount);
    let batches = if g.batch_size.is_empty() {
        vec![base.batch_size]
    } else {
        g.batch_size.clone()
    };
    let syncs = if g.target_sync_every.is_empty() {
        vec![base.target_sync_every]
    } else {
        g.target_sync_every.clone()
    };

    let mut configs = Vec::new();
    for &lr in &lrs {
        for &wd in &wds {
            for &discount in &discounts {
                for &batch_size in &batches {
                    for &sync in &syncs {
                        let mut cfg = base.clone();
                        cfg.lr = lr;
                        cfg.weight_decay = wd;
                        cfg.discount = discount;
                        cfg.batch_size = batch_size;
                        cfg.target_sync_every = sync;
                        cfg.validate()?;
                        configs.push(cfg);
                    }
                }
            }
        }
    }
    Ok(configs)
}

/// Run every grid point, dedupe by config hash, sort rows by accuracy
/// (descending; hash breaks ties for stable output).
pub fn run_sweep(base: &ExperimentConfig, spec: &GridSpec) -> Result<Vec<SweepRow>> {
    let configs = expand_grid(base, spec)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut rows = Vec::new();
    for cfg in configs {
        let hash = format!("{:016x}", cfg.config_hash());
        if !seen.insert(hash.clone()) {
            continue;
        }
        let artifacts = run_training(&cfg, &TransportConfig::Loopback)?;
        let straggler_rate = {
            let (mut stragglers, mut available) = (0u64, 0u64);
            for r in &artifacts.records {
                if r.available {
                    available += 1;
                    if r.straggler {
                        stragglers += 1;
                    }
                }
            }
            if available > 0 {
                stragglers as f64 / available as f64
            } else {
                0.0
            }
        };
        rows.push(SweepRow {
            config_hash: hash,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            discount: cfg.discount,
            batch_size: cfg.batch_size,
            target_sync_every: cfg.target_sync_every,
            final_accuracy: artifacts.final_metrics.accuracy,
            mean_reward: artifacts.mean_reward,
            straggler_rate,
        });
    }
    rows.sort_by(|a, b| {
        b.final_accuracy
            .partial_cmp(&a.final_accuracy)
            .unwrap()
            .then_with(|| a.config_hash.cmp(&b.config_hash))
    });
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e},{},{},{:.8e},{:.8e},{:.8e}\n",
            r.config_hash,
            r.lr,
            r.weight_decay,
            r.discount,
            r.batch_size,
            r.target_sync_every,
            r.final_accuracy,
            r.mean_reward,
            r.straggler_rate,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::validate_config;

    fn tiny_base() -> ExperimentConfig {
        validate_config(
            r#"
n_devices = 2
episodes = 2
steps_per_episode = 3
batch_size = 4
[data]
samples = 120
classes = 3
dim = 4
"#,
            &[],
        )
        .unwrap()
    }

    #[test]
    fn discount_axis_expands_per_point() {
        let spec = parse_grid("[grid]\ndiscount = [0.95, 0.99, 0.999]").unwrap();
        let configs = expand_grid(&tiny_base(), &spec).unwrap();
        assert_eq!(configs.len(), 3);
        let discounts: Vec<f64> = configs.iter().map(|c| c.discount).collect();
        assert_eq!(discounts, vec![0.95, 0.99, 0.999]);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let spec = parse_grid("").unwrap();
        assert!(expand_grid(&tiny_base(), &spec).is_err());
    }

    #[test]
    fn unknown_axis_rejected() {
        assert!(parse_grid("[grid]\nmomentum = [0.9]").is_err());
    }

    #[test]
    fn duplicate_points_collapse() {
        let spec = parse_grid("[grid]\nlr = [1e-3, 1e-3]").unwrap();
        let rows = run_sweep(&tiny_base(), &spec).unwrap();
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn single_point_matches_direct_run() {
        let base = tiny_base();
        let spec = parse_grid("[grid]\nlr = [1e-3]").unwrap();
        let rows = run_sweep(&base, &spec).unwrap();
        assert_eq!(rows.len(), 1);

        let mut cfg = base.clone();
        cfg.lr = 1e-3;
        let artifacts = run_training(&cfg, &TransportConfig::Loopback).unwrap();
        assert_eq!(rows[0].final_accuracy, artifacts.final_metrics.accuracy);
        assert_eq!(rows[0].mean_reward, artifacts.mean_reward);
    }

    #[test]
    fn base_table_overrides_apply() {
        let spec = parse_grid("[base]\nepisodes = 1\n[grid]\nlr = [1e-3]").unwrap();
        let configs = expand_grid(&tiny_base(), &spec).unwrap();
        assert_eq!(configs[0].episodes, 1);
    }

    #[test]
    fn rows_sorted_by_accuracy() {
        let spec = parse_grid("[grid]\nlr = [1e-3, 1e-4]").unwrap();
        let rows = run_sweep(&tiny_base(), &spec).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].final_accuracy >= rows[1].final_accuracy);
    }
}
