//! Heterogeneous-device dynamics, feasibility sets, and rewards.
//!
//! Walks one episode of device-state drift and prints how the feasibility
//! set and the reward react to capacity changes.
//!
//! ```bash
//! cargo run --release --example device_simulation
//! ```

use reindsplit::config::RewardConfig;
use reindsplit::env::{compute_reward, feasibility, init_devices, DeviceDynamics};
use reindsplit::rng::{scope, stream};
use reindsplit::splitnet::{catalog_cuts, default_network_spec};

fn main() -> reindsplit::Result<()> {
    let spec = default_network_spec(8, 5);
    let catalog = catalog_cuts(&spec, 5, [0.5, 7.5])?;
    println!("split catalog (resource = time requirement, linear in load):");
    for k in 1..=catalog.k() {
        let e = catalog.entry(k)?;
        println!(
            "  split {k}: {} client layers, load {:.4}, requires {:.3}",
            e.cut_layer, e.load_fraction, e.r_req
        );
    }

    let dynamics = DeviceDynamics {
        capacity_range: [0.5, 7.5],
        drift_sigma: 0.25,
        unavailability_prob: 0.10,
    };
    let weights = RewardConfig::default();
    let mut devices = init_devices(3, [0.5, 7.5], 42, 0);

    println!("\nround  device  R_t    T_t    avail  feasible_set     reward(best) reward(worst)");
    for round in 0..8 {
        for state in devices.iter_mut() {
            if state.available {
                let report = feasibility(state, &catalog)?;
                let set = format!("{:?}", report.feasibility_set());
                let best = report.feasibility_set().first().map_or(-1.0, |&k| {
                    compute_reward(0.85, &report, k, &weights)
                });
                let worst = compute_reward(0.85, &report, catalog.k(), &weights);
                println!(
                    "{round:>5}  {:>6}  {:>5.2}  {:>5.2}  {:>5}  {set:<15}  {best:>11.2}  {worst:>12.2}",
                    state.device_id, state.r_t, state.t_t, state.available
                );
            } else {
                println!(
                    "{round:>5}  {:>6}  {:>5.2}  {:>5.2}  {:>5}  (skipped)",
                    state.device_id, state.r_t, state.t_t, state.available
                );
            }
            let mut rng = stream(42, &[scope::DEVICE_STEP, round, state.device_id as u64]);
            *state = dynamics.step(state, &mut rng);
        }
    }
    Ok(())
}
