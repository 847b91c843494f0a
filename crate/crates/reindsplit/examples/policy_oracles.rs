//! Tabular oracles: value iteration against tabular Q-learning.
//!
//! Solves an allocation-shaped MDP exactly, learns it by simulation, and
//! shows the learned greedy policy never picks an infeasible action.
//!
//! ```bash
//! cargo run --release --example policy_oracles
//! ```

use reindsplit::agent::{
    greedy_policy, tabular_q_learning, value_iteration, EpsilonSchedule, LrSchedule,
};
use reindsplit::config::DecayShape;
use reindsplit::oracle::feasibility_mdp;

fn main() -> reindsplit::Result<()> {
    let mdp = feasibility_mdp();
    let (v_star, pi_star) = value_iteration(&mdp, 1e-12)?;

    println!("value iteration:");
    for (s, (v, a)) in v_star.iter().zip(&pi_star).enumerate() {
        println!("  state {s}: V* = {v:.4}, greedy action {a} (feasible iff action <= state)");
    }

    let schedule = EpsilonSchedule {
        start: 0.4,
        end: 0.1,
        episodes: 50,
        shape: DecayShape::Exponential,
    };
    let q = tabular_q_learning(
        &mdp,
        50,
        1000,
        LrSchedule {
            base: 0.5,
            visit_decay: 0.001,
        },
        &schedule,
        11,
    )?;
    let learned = greedy_policy(&q);

    println!("\ntabular q-learning after 50 000 steps:");
    for s in 0..mdp.n_states() {
        let row: Vec<String> = (0..mdp.n_actions())
            .map(|a| format!("{:+.3}", q[[s, a]]))
            .collect();
        println!("  state {s}: Q = [{}], greedy action {}", row.join(", "), learned[s]);
    }

    assert_eq!(learned, pi_star, "learned policy must match the exact one");
    println!("\nlearned greedy policy matches value iteration in every state");
    Ok(())
}
