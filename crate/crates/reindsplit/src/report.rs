//! Run directories and figure-ready reports.
//!
//! A run directory holds four files, each reproducible byte for byte from
//! `(config, seed)` (`summary.json` modulo its wall-time field):
//!
//! - `config.toml`: the fully-resolved configuration echo
//! - `rounds.csv`: one row per device per round, fixed header
//! - `split_freq.csv`: per-episode split counts and mean validation accuracy
//! - `summary.json`: final metrics, straggler series, wall time, seed
//!
//! Floats print with nine significant digits, enough to round-trip 32-bit
//! wire values exactly and keep diffs stable. `generate_report` rebuilds
//! every figure input from the files alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{minmax_normalize, Metrics};
use crate::orchestrator::{EpisodeStats, RoundRecord, RunArtifacts};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SPLIT_FREQ_FILE: &str = "split_freq.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";

pub const ROUNDS_HEADER: &str =
    "episode,step,device_id,available,r_t,t_t,action,feasible,reward,acc,client_load,straggler,epsilon,q_loss";

/// Nine significant digits: one leading digit plus eight decimals.
fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

fn fmt_opt_float(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

fn fmt_opt_bool(v: Option<bool>) -> String {
    v.map(|b| b.to_string()).unwrap_or_default()
}

/// Machine-readable run summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub config_hash: String,
    pub final_metrics: Metrics,
    /// Per-episode straggler rate over available device-steps.
    pub straggler_rates: Vec<f64>,
    pub wall_time_seconds: f64,
    pub feasible_steps: u64,
    pub transitions_pushed: u64,
    pub mean_reward: f64,
    /// Per-episode max client-segment gradient norm.
    pub max_client_grad_norms: Vec<f64>,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub n_devices: usize,
}

impl RunSummary {
    pub fn from_artifacts(artifacts: &RunArtifacts) -> Self {
        Self {
            seed: artifacts.config.seed,
            config_hash: format!("{:016x}", artifacts.config.config_hash()),
            final_metrics: artifacts.final_metrics,
            straggler_rates: artifacts.episodes.iter().map(|e| e.straggler_rate).collect(),
            wall_time_seconds: artifacts.wall_time_seconds,
            feasible_steps: artifacts.feasible_steps,
            transitions_pushed: artifacts.transitions_pushed,
            mean_reward: artifacts.mean_reward,
            max_client_grad_norms: artifacts
                .episodes
                .iter()
                .map(|e| e.max_client_grad_norm)
                .collect(),
            episodes: artifacts.config.episodes,
            steps_per_episode: artifacts.config.steps_per_episode,
            n_devices: artifacts.config.n_devices,
        }
    }
}

fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 96 + ROUNDS_HEADER.len() + 1);
    out.push_str(ROUNDS_HEADER);
    out.push('\n');
    for r in records {
        let action = r.action.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.episode,
            r.step,
            r.device_id,
            r.available,
            fmt_float(r.r_t),
            fmt_float(r.t_t),
            action,
            fmt_opt_bool(r.feasible),
            fmt_opt_float(r.reward),
            fmt_opt_float(r.acc),
            fmt_opt_float(r.client_load),
            r.straggler,
            fmt_float(r.epsilon),
            fmt_opt_float(r.q_loss),
        ));
    }
    out
}

fn split_freq_csv(episodes: &[EpisodeStats], k: usize) -> String {
    let mut header = String::from("episode");
    for i in 1..=k {
        header.push_str(&format!(",k{i}"));
    }
    header.push_str(",mean_val_acc\n");
    let mut out = header;
    for e in episodes {
        out.push_str(&e.episode.to_string());
        for c in &e.split_counts {
            out.push_str(&format!(",{c}"));
        }
        out.push_str(&format!(",{}\n", fmt_float(e.mean_val_acc)));
    }
    out
}

/// Write the four run files into `dir`, creating it if needed.
pub fn write_run_dir(dir: &Path, artifacts: &RunArtifacts) -> Result<()> {
    fs::create_dir_all(dir)?;
    let config_text =
        toml::to_string_pretty(&artifacts.config).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(CONFIG_FILE), config_text)?;
    fs::write(dir.join(ROUNDS_FILE), rounds_csv(&artifacts.records))?;
    fs::write(
        dir.join(SPLIT_FREQ_FILE),
        split_freq_csv(&artifacts.episodes, artifacts.config.n_splits),
    )?;
    let summary = RunSummary::from_artifacts(artifacts);
    let json =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Runtime(e.to_string()))?;
    fs::write(dir.join(SUMMARY_FILE), json + "\n")?;
    Ok(())
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|e| Error::Data(format!("bad float in {what}: '{field}' ({e})")))
}

fn parse_opt_f64(field: &str, what: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_f64(field, what).map(Some)
    }
}

/// Parse `rounds.csv` back into records.
pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = read_file(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    if header != ROUNDS_HEADER {
        return Err(Error::Data(format!(
            "{}: unexpected header '{header}'",
            path.display()
        )));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return Err(Error::Data(format!(
                "{} line {}: expected 14 fields, got {}",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let what = "rounds.csv";
        records.push(RoundRecord {
            episode: fields[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad episode '{}'", fields[0])))?,
            step: fields[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad step '{}'", fields[1])))?,
            device_id: fields[2]
                .parse()
                .map_err(|_| Error::Data(format!("bad device '{}'", fields[2])))?,
            available: fields[3] == "true",
            r_t: parse_f64(fields[4], what)?,
            t_t: parse_f64(fields[5], what)?,
            action: if fields[6].is_empty() {
                None
            } else {
                Some(
                    fields[6]
                        .parse()
                        .map_err(|_| Error::Data(format!("bad action '{}'", fields[6])))?,
                )
            },
            feasible: if fields[7].is_empty() {
                None
            } else {
                Some(fields[7] == "true")
            },
            reward: parse_opt_f64(fields[8], what)?,
            acc: parse_opt_f64(fields[9], what)?,
            client_load: parse_opt_f64(fields[10], what)?,
            straggler: fields[11] == "true",
            epsilon: parse_f64(fields[12], what)?,
            q_loss: parse_opt_f64(fields[13], what)?,
        });
    }
    Ok(records)
}

/// Parse `split_freq.csv`: per-episode counts plus mean validation accuracy.
pub fn read_split_freq_csv(path: &Path) -> Result<Vec<(u32, Vec<u64>, f64)>> {
    let text = read_file(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    if !header.starts_with("episode,k1") || !header.ends_with(",mean_val_acc") {
        return Err(Error::Data(format!(
            "{}: unexpected header '{header}'",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Data(format!("{}: short row", path.display())));
        }
        let episode: u32 = fields[0]
            .parse()
            .map_err(|_| Error::Data(format!("bad episode '{}'", fields[0])))?;
        let counts: Vec<u64> = fields[1..fields.len() - 1]
            .iter()
            .map(|f| {
                f.parse()
                    .map_err(|_| Error::Data(format!("bad count '{f}'")))
            })
            .collect::<Result<_>>()?;
        let acc = parse_f64(fields[fields.len() - 1], "split_freq.csv")?;
        rows.push((episode, counts, acc));
    }
    Ok(rows)
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let text = read_file(&dir.join(SUMMARY_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("summary.json: {e}")))
}

/// Figure-ready aggregates recomputed purely from the run files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    /// Final metrics min-max normalized to [0.01, 1].
    pub normalized_metrics: NormalizedMetrics,
    /// Raw final metrics for reference.
    pub final_metrics: Metrics,
    /// Total split selections over the run, index k-1.
    pub split_frequency_totals: Vec<u64>,
    /// Per-episode `[mean_reward, mean_val_acc]` pairs.
    pub reward_accuracy_pairs: Vec<[f64; 2]>,
    pub straggler: StragglerSummary,
    /// Available device-steps per episode (frequency denominators).
    pub available_steps_per_episode: Vec<u64>,
    pub mean_client_load: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub mcc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StragglerSummary {
    /// Mean straggler rate over the first ten episodes.
    pub first10: f64,
    /// Mean straggler rate over the last ten episodes.
    pub last10: f64,
    /// last10 / first10; null when the early rate is zero.
    pub ratio: Option<f64>,
}

/// Build the report from a complete run directory. Pure function of the
/// files, so re-running is idempotent.
pub fn generate_report(dir: &Path) -> Result<RunReport> {
    let summary = read_summary(dir)?;
    let records = read_rounds_csv(&dir.join(ROUNDS_FILE))?;
    let split_rows = read_split_freq_csv(&dir.join(SPLIT_FREQ_FILE))?;

    let k = split_rows.first().map(|(_, c, _)| c.len()).unwrap_or(0);
    let mut totals = vec![0u64; k];
    for (_, counts, _) in &split_rows {
        for (t, c) in totals.iter_mut().zip(counts) {
            *t += c;
        }
    }

    let n_episodes = split_rows.len();
    let mut reward_sum = vec![0.0; n_episodes];
    let mut reward_count = vec![0u64; n_episodes];
    let mut available = vec![0u64; n_episodes];
    let mut load_sum = 0.0;
    let mut load_count = 0u64;
    for r in &records {
        let e = r.episode as usize;
        if e >= n_episodes {
            return Err(Error::Data(format!(
                "rounds.csv episode {e} outside split_freq.csv range"
            )));
        }
        if r.available {
            available[e] += 1;
            if let Some(reward) = r.reward {
                reward_sum[e] += reward;
                reward_count[e] += 1;
            }
            if let Some(load) = r.client_load {
                load_sum += load;
                load_count += 1;
            }
        }
    }

    let reward_accuracy_pairs: Vec<[f64; 2]> = split_rows
        .iter()
        .map(|(e, _, acc)| {
            let idx = *e as usize;
            let mean_reward = if reward_count[idx] > 0 {
                reward_sum[idx] / reward_count[idx] as f64
            } else {
                0.0
            };
            [mean_reward, *acc]
        })
        .collect();

    let rates = &summary.straggler_rates;
    let window = rates.len().min(10);
    let (first10, last10) = if window == 0 {
        (0.0, 0.0)
    } else {
        (
            rates[..window].iter().sum::<f64>() / window as f64,
            rates[rates.len() - window..].iter().sum::<f64>() / window as f64,
        )
    };

    let normalized = minmax_normalize(&summary.final_metrics.as_vec(), 0.01, 1.0)?;

    Ok(RunReport {
        seed: summary.seed,
        config_hash: summary.config_hash.clone(),
        normalized_metrics: NormalizedMetrics {
            accuracy: normalized[0],
            macro_precision: normalized[1],
            macro_recall: normalized[2],
            macro_f1: normalized[3],
            mcc: normalized[4],
        },
        final_metrics: summary.final_metrics,
        split_frequency_totals: totals,
        reward_accuracy_pairs,
        straggler: StragglerSummary {
            first10,
            last10,
            ratio: if first10 > 0.0 {
                Some(last10 / first10)
            } else {
                None
            },
        },
        available_steps_per_episode: available,
        mean_client_load: if load_count > 0 {
            load_sum / load_count as f64
        } else {
            0.0
        },
    })
}

/// Write `report.json` into the run directory and return the report.
pub fn write_report(dir: &Path) -> Result<(RunReport, PathBuf)> {
    let report = generate_report(dir)?;
    let path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Runtime(e.to_string()))?;
    fs::write(&path, json + "\n")?;
    Ok((report, path))
}
