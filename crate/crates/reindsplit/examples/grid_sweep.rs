//! Deterministic hyperparameter sweep.
//!
//! Expands a small discount/learning-rate grid, runs each trial, and prints
//! the ranked results.
//!
//! ```bash
//! cargo run --release --example grid_sweep
//! ```

use reindsplit::config::ExperimentConfig;
use reindsplit::sweep::{parse_grid, run_sweep, sweep_csv};

fn main() -> reindsplit::Result<()> {
    let base = ExperimentConfig {
        episodes: 4,
        steps_per_episode: 15,
        ..ExperimentConfig::default()
    };
    let spec = parse_grid(
        r#"
[grid]
lr = [1e-3, 1e-4]
discount = [0.95, 0.99, 0.999]
"#,
    )?;

    let rows = run_sweep(&base, &spec)?;
    println!("{}", sweep_csv(&rows));
    println!("best trial: lr {:.0e}, discount {}, accuracy {:.4}",
        rows[0].lr, rows[0].discount, rows[0].final_accuracy);
    Ok(())
}
