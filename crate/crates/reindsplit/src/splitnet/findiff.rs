//! Central finite-difference verification of analytic gradients.
//!
//! Checks every parameter gradient and every cut-activation gradient of a
//! (small) network against central differences of the loss. Inputs are
//! jittered away from ReLU kinks first, so no perturbation crosses a kink
//! and the comparison is meaningful.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::stream;

use super::{
    backward_segment, forward_segment, softmax_xent, LayerGrads, ParamStore,
};

/// Harness self-test knob: corrupt the analytic gradients so a broken
/// backward pass is demonstrably caught.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCorruption {
    None,
    /// Flip the sign of every first-layer gradient before comparing.
    SignFlip,
}

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    /// Where the worst disagreement sits, for diagnostics.
    pub worst: String,
}

/// Central-difference gradients of `loss` with respect to every parameter.
/// Perturbs the store in place and restores it; `loss` must be pure.
pub fn fd_param_grads<F>(store: &mut ParamStore, step: f64, loss: F) -> Vec<LayerGrads>
where
    F: Fn(&ParamStore) -> f64,
{
    let depth = store.spec().depth();
    let mut grads = Vec::with_capacity(depth);
    for li in 0..depth {
        let (rows, cols) = store.layers()[li].w.dim();
        let mut gw = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.layers()[li].w[[r, c]];
                store.layers_mut()[li].w[[r, c]] = orig + step;
                let up = loss(store);
                store.layers_mut()[li].w[[r, c]] = orig - step;
                let down = loss(store);
                store.layers_mut()[li].w[[r, c]] = orig;
                gw[[r, c]] = (up - down) / (2.0 * step);
            }
        }
        let n = store.layers()[li].b.len();
        let mut gb = ndarray::Array1::zeros(n);
        for i in 0..n {
            let orig = store.layers()[li].b[i];
            store.layers_mut()[li].b[i] = orig + step;
            let up = loss(store);
            store.layers_mut()[li].b[i] = orig - step;
            let down = loss(store);
            store.layers_mut()[li].b[i] = orig;
            gb[i] = (up - down) / (2.0 * step);
        }
        grads.push(LayerGrads { w: gw, b: gb });
    }
    grads
}

fn loss_of(store: &ParamStore, batch: &Array2<f64>, labels: &[usize]) -> f64 {
    let trace = forward_segment(&store.spec().layers, store.layers(), batch).expect("forward");
    softmax_xent(&trace.output, labels).expect("loss").loss
}

/// Shift the batch until every ReLU pre-activation sits at least `margin`
/// from zero, so finite differences never cross a kink.
fn jitter_off_kinks(
    store: &ParamStore,
    batch: &Array2<f64>,
    margin: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut batch = batch.clone();
    let mut rng = stream(seed, &[0xF1D1]);
    for attempt in 0..64 {
        let trace = forward_segment(&store.spec().layers, store.layers(), &batch)?;
        let min_gap = trace
            .preacts
            .iter()
            .zip(&store.spec().layers)
            .filter(|(_, spec)| spec.activation == super::Activation::Relu)
            .flat_map(|(z, _)| z.iter())
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min);
        if min_gap > margin {
            return Ok(batch);
        }
        let scale = 0.01 * (1.0 + attempt as f64);
        batch.mapv_inplace(|v| v + scale * rng.sample::<f64, _>(StandardNormal));
    }
    Err(Error::Runtime(
        "could not jitter batch away from ReLU kinks".into(),
    ))
}

/// Relative error: the per-entry difference normalized by the larger of the
/// per-entry magnitude and the gradient's overall scale, so near-zero
/// entries do not register finite-difference noise as error.
fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(scale)
}

pub fn finite_diff_check(
    store: &ParamStore,
    batch: &Array2<f64>,
    labels: &[usize],
    step: f64,
) -> Result<FiniteDiffReport> {
    finite_diff_check_with(store, batch, labels, step, GradCorruption::None)
}

/// Full check with a corruption knob for harness self-tests.
pub fn finite_diff_check_with(
    store: &ParamStore,
    batch: &Array2<f64>,
    labels: &[usize],
    step: f64,
    corruption: GradCorruption,
) -> Result<FiniteDiffReport> {
    if store.param_count() > 5_000 {
        return Err(Error::Runtime(format!(
            "finite_diff_check is for small networks (<= 5000 params, got {})",
            store.param_count()
        )));
    }
    let batch = jitter_off_kinks(store, batch, 1e-3, 0x5EED)?;
    let spec = store.spec().clone();

    // Analytic gradients: parameters and activations at every cut.
    let trace = forward_segment(&spec.layers, store.layers(), &batch)?;
    let loss_out = softmax_xent(&trace.output, labels)?;
    let (mut analytic, _) =
        backward_segment(&spec.layers, store.layers(), &trace, &loss_out.dlogits);
    if corruption == GradCorruption::SignFlip {
        analytic[0].w.mapv_inplace(|g| -g);
        analytic[0].b.mapv_inplace(|g| -g);
    }

    let scale = analytic
        .iter()
        .flat_map(|g| g.w.iter().chain(g.b.iter()))
        .map(|g| g.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);

    let mut work = store.clone();
    let numeric = fd_param_grads(&mut work, step, |s| loss_of(s, &batch, labels));

    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    for (li, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (idx, (av, nv)) in a.w.iter().zip(n.w.iter()).enumerate() {
            let e = rel_err(*av, *nv, scale);
            if e > max_rel {
                max_rel = e;
                worst = format!("layer {li} weight #{idx} ({av:.3e} vs {nv:.3e})");
            }
        }
        for (idx, (av, nv)) in a.b.iter().zip(n.b.iter()).enumerate() {
            let e = rel_err(*av, *nv, scale);
            if e > max_rel {
                max_rel = e;
                worst = format!("layer {li} bias #{idx} ({av:.3e} vs {nv:.3e})");
            }
        }
    }

    // Cut-activation gradients: perturb the activations entering each server
    // segment and compare against the backward pass gradient at that cut.
    for cut in 1..spec.depth() {
        let server_spec = &spec.layers[cut..];
        let server_layers = &store.layers()[cut..];
        let client_trace = forward_segment(&spec.layers[..cut], &store.layers()[..cut], &batch)?;
        let acts = client_trace.output.clone();

        let strace = forward_segment(server_spec, server_layers, &acts)?;
        let sloss = softmax_xent(&strace.output, labels)?;
        let (_, mut grad_at_cut) = backward_segment(server_spec, server_layers, &strace, &sloss.dlogits);
        if corruption == GradCorruption::SignFlip {
            grad_at_cut.mapv_inplace(|g| -g);
        }
        let cut_scale = grad_at_cut
            .iter()
            .map(|g| g.abs())
            .fold(0.0f64, f64::max)
            .max(1e-12);

        let (rows, cols) = acts.dim();
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = acts.clone();
                plus[[r, c]] += step;
                let up = softmax_xent(
                    &forward_segment(server_spec, server_layers, &plus)?.output,
                    labels,
                )?
                .loss;
                let mut minus = acts.clone();
                minus[[r, c]] -= step;
                let down = softmax_xent(
                    &forward_segment(server_spec, server_layers, &minus)?.output,
                    labels,
                )?
                .loss;
                let numeric = (up - down) / (2.0 * step);
                let e = rel_err(grad_at_cut[[r, c]], numeric, cut_scale);
                if e > max_rel {
                    max_rel = e;
                    worst = format!(
                        "cut {cut} activation [{r},{c}] ({:.3e} vs {numeric:.3e})",
                        grad_at_cut[[r, c]]
                    );
                }
            }
        }
    }

    Ok(FiniteDiffReport {
        max_rel_err: max_rel,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splitnet::{build_network, NetworkSpec};

    fn seeded_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, &[7]);
        Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn relu_net_matches_finite_differences() {
        let spec = NetworkSpec::chain(&[6, 10, 8, 4]).unwrap();
        let store = build_network(&spec, 21).unwrap();
        let batch = seeded_batch(4, 6, 1);
        let labels = vec![0, 1, 2, 3];
        let report = finite_diff_check(&store, &batch, &labels, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn linear_net_is_near_exact() {
        let mut spec = NetworkSpec::chain(&[5, 8, 3]).unwrap();
        for l in &mut spec.layers {
            l.activation = super::super::Activation::Linear;
        }
        let store = build_network(&spec, 33).unwrap();
        let batch = seeded_batch(4, 5, 2);
        let labels = vec![0, 1, 2, 1];
        let report = finite_diff_check(&store, &batch, &labels, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn sign_flip_is_caught() {
        let spec = NetworkSpec::chain(&[6, 10, 8, 4]).unwrap();
        let store = build_network(&spec, 21).unwrap();
        let batch = seeded_batch(4, 6, 1);
        let labels = vec![0, 1, 2, 3];
        let report =
            finite_diff_check_with(&store, &batch, &labels, 1e-5, GradCorruption::SignFlip)
                .unwrap();
        assert!(report.max_rel_err > 0.1, "{report:?}");
    }

    #[test]
    fn refuses_large_networks() {
        let spec = NetworkSpec::chain(&[64, 128, 64, 10]).unwrap();
        let store = build_network(&spec, 1).unwrap();
        let batch = seeded_batch(2, 64, 3);
        assert!(finite_diff_check(&store, &batch, &[0, 1], 1e-5).is_err());
    }
}
