//! Inspect the trained cut-point policy.
//!
//! Trains for a handful of episodes, then sweeps the (capacity, time) state
//! grid and prints which split the greedy policy picks where, alongside the
//! feasibility boundary.
//!
//! ```bash
//! cargo run --release --example policy_inspection
//! ```

use reindsplit::agent::normalize_state;
use reindsplit::config::ExperimentConfig;
use reindsplit::env::{feasibility, DeviceState};
use reindsplit::orchestrator::{run_training, TransportConfig};
use reindsplit::splitnet::{catalog_cuts, default_network_spec};

fn main() -> reindsplit::Result<()> {
    let cfg = ExperimentConfig {
        episodes: 25,
        steps_per_episode: 50,
        seed: 42,
        ..ExperimentConfig::default()
    };
    eprintln!("training {} episodes ...", cfg.episodes);
    let artifacts = run_training(&cfg, &TransportConfig::Loopback)?;
    let qnet = &artifacts.qnets[0];

    let spec = default_network_spec(cfg.data.dim, cfg.data.classes);
    let catalog = catalog_cuts(&spec, cfg.n_splits, cfg.capacity_range)?;

    println!("greedy split by state; rows = time window, cols = capacity");
    println!("('-' marks states where no split fits; 'x' marks infeasible greedy picks)\n");
    let grid = 15;
    let [low, high] = cfg.capacity_range;
    print!("  T\\R ");
    for col in 0..grid {
        print!("{:>4.1}", low + (high - low) * col as f64 / (grid - 1) as f64);
    }
    println!();
    for row in (0..grid).rev() {
        let t_t = low + (high - low) * row as f64 / (grid - 1) as f64;
        print!("{t_t:>5.1} ");
        for col in 0..grid {
            let r_t = low + (high - low) * col as f64 / (grid - 1) as f64;
            let state = DeviceState {
                device_id: 0,
                r_t,
                t_t,
                available: true,
            };
            let report = feasibility(&state, &catalog)?;
            if report.feasibility_set().is_empty() {
                print!("{:>4}", "-");
                continue;
            }
            let s = normalize_state(r_t, t_t, None, high);
            let q = qnet.q_forward(&s)?;
            let mut best = 0;
            for (i, &v) in q.iter().enumerate() {
                if v > q[best] {
                    best = i;
                }
            }
            if report.feasible(best + 1) {
                print!("{:>4}", best + 1);
            } else {
                print!("{:>4}", "x");
            }
        }
        println!();
    }
    println!(
        "\nlast-episode straggler rate: {:.3}",
        artifacts.episodes.last().unwrap().straggler_rate
    );
    Ok(())
}
