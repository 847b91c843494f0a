//! Split execution equals the monolithic pass, bit for bit.
//!
//! Runs the forward pass through every catalog cut as a client/server pair
//! and compares logits and gradients against the single-machine path.
//!
//! ```bash
//! cargo run --release --example split_execution
//! ```

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use reindsplit::rng::stream;
use reindsplit::splitnet::{
    backward_segment, catalog_cuts, build_network, default_network_spec, forward_segment,
    softmax_xent,
};

fn main() -> reindsplit::Result<()> {
    let spec = default_network_spec(8, 5);
    let catalog = catalog_cuts(&spec, 5, [0.5, 7.5])?;
    let store = build_network(&spec, 42)?;

    let mut rng = stream(1, &[0]);
    let batch = Array2::from_shape_fn((8, 8), |_| rng.sample::<f64, _>(StandardNormal));
    let labels: Vec<usize> = (0..8).map(|i| i % 5).collect();

    let full = forward_segment(&spec.layers, store.layers(), &batch)?;
    let loss = softmax_xent(&full.output, &labels)?;
    let (full_grads, _) = backward_segment(&spec.layers, store.layers(), &full, &loss.dlogits);

    println!("split  client_layers  load      logits_equal  grads_equal");
    for split in 1..=catalog.k() {
        let entry = catalog.entry(split)?;
        let cut = entry.cut_layer;

        let client = forward_segment(&spec.layers[..cut], &store.layers()[..cut], &batch)?;
        let server =
            forward_segment(&spec.layers[cut..], &store.layers()[cut..], &client.output)?;
        let logits_equal = server.output == full.output;

        let sloss = softmax_xent(&server.output, &labels)?;
        let (server_grads, grad_at_cut) =
            backward_segment(&spec.layers[cut..], &store.layers()[cut..], &server, &sloss.dlogits);
        let (client_grads, _) =
            backward_segment(&spec.layers[..cut], &store.layers()[..cut], &client, &grad_at_cut);
        let grads_equal = client_grads
            .iter()
            .chain(server_grads.iter())
            .zip(full_grads.iter())
            .all(|(a, b)| a == b);

        println!(
            "{split:>5}  {cut:>13}  {:>8.4}  {logits_equal:>12}  {grads_equal}",
            entry.load_fraction
        );
    }
    Ok(())
}
