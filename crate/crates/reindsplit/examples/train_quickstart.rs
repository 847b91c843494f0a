//! Minimal end-to-end training run.
//!
//! Builds a small experiment in code, runs the full dynamic-split loop on
//! the loopback transport, and prints the per-episode learning curve.
//!
//! ```bash
//! cargo run --release --example train_quickstart
//! ```

use reindsplit::config::ExperimentConfig;
use reindsplit::orchestrator::{run_training, TransportConfig};

fn main() -> reindsplit::Result<()> {
    let cfg = ExperimentConfig {
        episodes: 12,
        steps_per_episode: 30,
        seed: 7,
        ..ExperimentConfig::default()
    };

    let artifacts = run_training(&cfg, &TransportConfig::Loopback)?;

    println!("episode  straggler  mean_reward  mean_val_acc  splits(k1..k5)");
    for ep in &artifacts.episodes {
        println!(
            "{:>7}  {:>9.3}  {:>11.3}  {:>12.3}  {:?}",
            ep.episode, ep.straggler_rate, ep.mean_reward, ep.mean_val_acc, ep.split_counts
        );
    }
    println!(
        "\nfinal test metrics: accuracy {:.4}  macro-f1 {:.4}  mcc {:.4}",
        artifacts.final_metrics.accuracy,
        artifacts.final_metrics.macro_f1,
        artifacts.final_metrics.mcc
    );
    println!(
        "feasible device-steps: {} of {} ({:.1}s wall time)",
        artifacts.feasible_steps, artifacts.transitions_pushed, artifacts.wall_time_seconds
    );
    Ok(())
}
