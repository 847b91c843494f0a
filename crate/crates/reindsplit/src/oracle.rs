//! Independent verification suite.
//!
//! Each check pins one trust anchor: tabular Q-learning against value
//! iteration, analytic gradients against central differences, split
//! execution against the monolithic path, and the reward function against
//! hand-evaluated fixtures. The CLI `oracle` subcommand runs all of them
//! and fails loudly if any disagree. A corruption knob flips gradient signs
//! so the suite can demonstrate it catches a broken backward pass.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::agent::{
    greedy_policy, q_reference_eval, tabular_q_learning, value_iteration, EpsilonSchedule,
    LrSchedule, QNetwork, TabularMdp, Transition,
};
use crate::config::{DecayShape, RewardConfig, RewardMode};
use crate::env::{compute_reward, FeasibilityReport};
use crate::error::Result;
use crate::rng::stream;
use crate::splitnet::{
    backward_segment, build_network, fd_param_grads, finite_diff_check_with, forward_segment,
    softmax_xent, Activation, GradCorruption, NetworkSpec,
};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed,
        detail,
    }
}

fn seeded_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, &[0x0B5]);
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// A small MDP shaped like the allocation problem: three capacity levels,
/// three splits, split k feasible at level s iff k <= s + 1. Infeasible
/// picks pay the flat penalty; feasible picks pay a split-dependent
/// positive reward. The state evolves uniformly regardless of the action,
/// like the device dynamics.
pub fn feasibility_mdp() -> TabularMdp {
    let n_states = 3;
    let n_actions = 3;
    let uniform = vec![1.0 / n_states as f64; n_states];
    let mut rewards = vec![vec![0.0; n_actions]; n_states];
    for (s, row) in rewards.iter_mut().enumerate() {
        for (a, r) in row.iter_mut().enumerate() {
            *r = if a <= s { 0.5 + 0.1 * a as f64 } else { -1.0 };
        }
    }
    TabularMdp {
        transitions: vec![vec![uniform.clone(); n_actions]; n_states],
        rewards,
        discount: 0.95,
    }
}

fn check_tabular_vs_value_iteration() -> Result<CheckResult> {
    // Shared fixture: greedy(Q-learning) must equal the value-iteration
    // policy on both MDPs, with Q-values within 1e-2 of Q* on the second.
    let feas = feasibility_mdp();
    let (_, pi_star) = value_iteration(&feas, 1e-12)?;
    let eps = EpsilonSchedule {
        start: 0.4,
        end: 0.1,
        episodes: 50,
        shape: DecayShape::Exponential,
    };
    let q = tabular_q_learning(
        &feas,
        50,
        1000,
        LrSchedule {
            base: 0.5,
            visit_decay: 0.001,
        },
        &eps,
        11,
    )?;
    let greedy = greedy_policy(&q);
    let feas_ok = greedy == pi_star;

    // No greedy action may sit outside the feasibility set.
    let mut infeasible_greedy = 0;
    for (s, &a) in greedy.iter().enumerate() {
        if a > s {
            infeasible_greedy += 1;
        }
    }
    let bound_ok = infeasible_greedy == 0;

    // With a feasible greedy policy, the epsilon-greedy probability of an
    // infeasible pick is exactly the uniform component:
    // eps * |infeasible(s)| / K. Check the empirical frequency against
    // that bound (5 sigma of slack on 100k draws).
    let eps_probe = 0.2;
    let draws = 100_000usize;
    let mut rng = stream(29, &[0xE6]);
    let mut infeasible_picks = 0u64;
    let mut expected = 0.0;
    for i in 0..draws {
        use rand::Rng;
        let s = i % feas.n_states();
        expected += eps_probe * (feas.n_actions() - (s + 1)) as f64 / feas.n_actions() as f64;
        let a = if rng.gen::<f64>() < eps_probe {
            rng.gen_range(0..feas.n_actions())
        } else {
            greedy[s]
        };
        if a > s {
            infeasible_picks += 1;
        }
    }
    let expected_rate = expected / draws as f64;
    let sigma = (expected_rate * (1.0 - expected_rate) / draws as f64).sqrt();
    let observed = infeasible_picks as f64 / draws as f64;
    let eps_bound_ok = observed <= expected_rate + 5.0 * sigma;

    let chain = TabularMdp {
        transitions: vec![
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        ],
        rewards: vec![vec![0.0, 0.25], vec![1.0, -1.0], vec![0.5, 0.3]],
        discount: 0.9,
    };
    let (v_star, pi_chain) = value_iteration(&chain, 1e-12)?;
    let q_chain = tabular_q_learning(
        &chain,
        50,
        1000,
        LrSchedule {
            base: 0.5,
            visit_decay: 0.001,
        },
        &EpsilonSchedule {
            start: 0.3,
            end: 0.3,
            episodes: 1,
            shape: DecayShape::Linear,
        },
        123,
    )?;
    let chain_policy_ok = greedy_policy(&q_chain) == pi_chain;
    let mut max_gap = 0.0f64;
    for (s, &a) in pi_chain.iter().enumerate() {
        max_gap = max_gap.max((q_chain[[s, a]] - v_star[s]).abs());
    }
    let chain_q_ok = max_gap < 1e-2;

    let passed = feas_ok && bound_ok && eps_bound_ok && chain_policy_ok && chain_q_ok;
    Ok(check(
        "tabular q-learning vs value iteration",
        passed,
        format!(
            "feasibility-policy match {feas_ok}, zero infeasible greedy picks {bound_ok}, \
             eps-greedy infeasible rate {observed:.4} <= bound {expected_rate:.4}, \
             chain policy match {chain_policy_ok}, max |Q - V*| = {max_gap:.2e}"
        ),
    ))
}

fn check_splitnet_gradients(corruption: GradCorruption) -> Result<CheckResult> {
    let spec = NetworkSpec::chain(&[6, 10, 8, 4])?;
    let store = build_network(&spec, 21)?;
    let batch = seeded_batch(4, 6, 1);
    let labels = vec![0usize, 1, 2, 3];
    let relu = finite_diff_check_with(&store, &batch, &labels, 1e-5, corruption)?;

    let mut linear_spec = NetworkSpec::chain(&[5, 8, 3])?;
    for l in &mut linear_spec.layers {
        l.activation = Activation::Linear;
    }
    let linear_store = build_network(&linear_spec, 33)?;
    let linear = finite_diff_check_with(
        &linear_store,
        &seeded_batch(4, 5, 2),
        &[0, 1, 2, 1],
        1e-5,
        corruption,
    )?;

    let passed = relu.max_rel_err < 1e-6 && linear.max_rel_err < 1e-9;
    Ok(check(
        "splitnet gradients vs central differences",
        passed,
        format!(
            "relu max rel err {:.2e} (worst {}), linear max rel err {:.2e}",
            relu.max_rel_err, relu.worst, linear.max_rel_err
        ),
    ))
}

fn check_qnet_gradients(corruption: GradCorruption) -> Result<CheckResult> {
    let qnet = QNetwork::new(2, 5, 7)?;
    let transitions: Vec<Transition> = (0..8)
        .map(|i| Transition {
            state: vec![0.1 + 0.1 * i as f64, 0.9 - 0.05 * i as f64],
            action: i % 5 + 1,
            reward: 0.0,
            next_state: vec![0.0, 0.0],
            terminal: true,
        })
        .collect();
    // Fixed targets; the loss is a pure function of the online parameters.
    let targets: Vec<f64> = (0..8).map(|i| 0.3 * (i as f64 - 4.0)).collect();

    let spec = qnet.store().spec().clone();
    let n = transitions.len();
    let mut states = Array2::zeros((n, 2));
    for (i, t) in transitions.iter().enumerate() {
        states[[i, 0]] = t.state[0];
        states[[i, 1]] = t.state[1];
    }

    // Analytic gradient of the batch MSE through the network.
    let trace = forward_segment(&spec.layers, qnet.store().layers(), &states)?;
    let mut dlogits = Array2::zeros(trace.output.dim());
    let inv_n = 1.0 / n as f64;
    for (i, t) in transitions.iter().enumerate() {
        let a = t.action - 1;
        dlogits[[i, a]] = 2.0 * (trace.output[[i, a]] - targets[i]) * inv_n;
    }
    let (mut analytic, _) =
        backward_segment(&spec.layers, qnet.store().layers(), &trace, &dlogits);
    if corruption == GradCorruption::SignFlip {
        analytic[0].w.mapv_inplace(|g| -g);
    }

    let mut work = qnet.store().clone();
    let transitions_fd = transitions.clone();
    let targets_fd = targets.clone();
    let numeric = fd_param_grads(&mut work, 1e-5, move |store| {
        let trace = forward_segment(&spec.layers, store.layers(), &states).expect("forward");
        let mut loss = 0.0;
        for (i, t) in transitions_fd.iter().enumerate() {
            let err = trace.output[[i, t.action - 1]] - targets_fd[i];
            loss += err * err / transitions_fd.len() as f64;
        }
        loss
    });

    let scale = analytic
        .iter()
        .flat_map(|g| g.w.iter().chain(g.b.iter()))
        .map(|g| g.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut max_rel = 0.0f64;
    for (a, nu) in analytic.iter().zip(&numeric) {
        for (av, nv) in a.w.iter().zip(nu.w.iter()) {
            max_rel = max_rel.max((av - nv).abs() / (av.abs() + nv.abs()).max(scale));
        }
        for (av, nv) in a.b.iter().zip(nu.b.iter()) {
            max_rel = max_rel.max((av - nv).abs() / (av.abs() + nv.abs()).max(scale));
        }
    }

    // The independent two-matrix evaluation must agree exactly.
    let sample_state = [0.25, 0.75];
    let exact = qnet.q_forward(&sample_state)? == q_reference_eval(&qnet, &sample_state);

    let passed = max_rel < 1e-6 && exact;
    Ok(check(
        "q-network gradients vs central differences",
        passed,
        format!("max rel err {max_rel:.2e}, reference eval exact {exact}"),
    ))
}

fn check_split_equivalence(corruption: GradCorruption) -> Result<CheckResult> {
    let spec = NetworkSpec::chain(&[8, 8, 16, 16, 16, 8, 5])?;
    let store = build_network(&spec, 5)?;
    let batch = seeded_batch(6, 8, 3);
    let labels = vec![0usize, 1, 2, 3, 4, 0];

    let full_trace = forward_segment(&spec.layers, store.layers(), &batch)?;
    let full_loss = softmax_xent(&full_trace.output, &labels)?;
    let (full_grads, _) =
        backward_segment(&spec.layers, store.layers(), &full_trace, &full_loss.dlogits);

    let mut worst: f64 = 0.0;
    for cut in 1..spec.depth() {
        let client_spec = &spec.layers[..cut];
        let server_spec = &spec.layers[cut..];
        let ctrace = forward_segment(client_spec, &store.layers()[..cut], &batch)?;
        let strace = forward_segment(server_spec, &store.layers()[cut..], &ctrace.output)?;
        for (a, b) in strace.output.iter().zip(full_trace.output.iter()) {
            worst = worst.max(rel_gap(*a, *b));
        }
        let sloss = softmax_xent(&strace.output, &labels)?;
        let (server_grads, grad_at_cut) =
            backward_segment(server_spec, &store.layers()[cut..], &strace, &sloss.dlogits);
        let (mut client_grads, _) =
            backward_segment(client_spec, &store.layers()[..cut], &ctrace, &grad_at_cut);
        if corruption == GradCorruption::SignFlip {
            client_grads[0].w.mapv_inplace(|g| -g);
        }
        for (j, g) in client_grads.iter().enumerate() {
            for (a, b) in g.w.iter().zip(full_grads[j].w.iter()) {
                worst = worst.max(rel_gap(*a, *b));
            }
            for (a, b) in g.b.iter().zip(full_grads[j].b.iter()) {
                worst = worst.max(rel_gap(*a, *b));
            }
        }
        for (j, g) in server_grads.iter().enumerate() {
            for (a, b) in g.w.iter().zip(full_grads[cut + j].w.iter()) {
                worst = worst.max(rel_gap(*a, *b));
            }
        }
    }
    let passed = worst < 1e-12;
    Ok(check(
        "split execution vs monolithic path",
        passed,
        format!("worst relative gap {worst:.2e} over all cuts"),
    ))
}

fn rel_gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }
}

fn check_reward_fixtures() -> Result<CheckResult> {
    let strict = RewardConfig {
        alpha: 1.0,
        beta: 0.5,
        gamma_pen: 1.0,
        penalty_magnitude: 1.0,
        mode: RewardMode::Strict,
    };
    // Feasible branch: deficits identically zero, reward = alpha * acc.
    let feasible_report = FeasibilityReport {
        deltas: vec![(1.0, 2.0)],
    };
    let a = compute_reward(0.80, &feasible_report, 1, &strict);
    let feasible_ok = a == 0.80;

    // Infeasible branch: flat penalty.
    let infeasible_report = FeasibilityReport {
        deltas: vec![(-0.5, 1.0)],
    };
    let b = compute_reward(0.80, &infeasible_report, 1, &strict);
    let infeasible_ok = b == -1.0;

    // Soft mode hand value: 1.0*0.8 - 0.5*1.0 = 0.30.
    let soft = RewardConfig {
        mode: RewardMode::Soft,
        ..strict
    };
    let soft_report = FeasibilityReport {
        deltas: vec![(-1.0, 0.5)],
    };
    let c = compute_reward(0.8, &soft_report, 1, &soft);
    let soft_ok = (c - 0.30).abs() < 1e-12;

    Ok(check(
        "reward hand-value fixtures",
        feasible_ok && infeasible_ok && soft_ok,
        format!("feasible {a}, infeasible {b}, soft {c}"),
    ))
}

/// Run the whole suite. `corruption` is a self-test hook: with
/// `SignFlip` the gradient-based checks must fail.
pub fn run_suite(corruption: GradCorruption) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_tabular_vs_value_iteration()?,
        check_splitnet_gradients(corruption)?,
        check_qnet_gradients(corruption)?,
        check_split_equivalence(corruption)?,
        check_reward_fixtures()?,
    ])
}
