//! IID versus class-skewed data sharding.
//!
//! Generates the default blobs dataset, splits it 75/15/10, and prints the
//! per-device class histograms under both sharding schemes.
//!
//! ```bash
//! cargo run --release --example data_sharding
//! ```

use reindsplit::data::{make_blobs, split_train_val_test, Split};
use reindsplit::orchestrator::{shard_iid, shard_noniid, ShardAssignment};

fn histogram(shards: &ShardAssignment, labels: &[usize], n_classes: usize) {
    for (device, shard) in shards.train.iter().enumerate() {
        let mut counts = vec![0usize; n_classes];
        for &i in shard {
            counts[labels[i]] += 1;
        }
        println!("  device {device}: {counts:?}  ({} samples)", shard.len());
    }
}

fn main() -> reindsplit::Result<()> {
    let data = make_blobs(1000, 5, 8, 0.5, 42)?;
    let tagged = split_train_val_test(data, 42)?;
    println!(
        "dataset: 1000 samples, 5 classes -> {} train / {} val / {} test",
        tagged.indices(Split::Train).len(),
        tagged.indices(Split::Val).len(),
        tagged.indices(Split::Test).len()
    );

    println!("\nIID shards (uniform partition):");
    let iid = shard_iid(&tagged, 5, 42)?;
    histogram(&iid, &tagged.data.labels, 5);

    println!("\nnon-IID shards (2 class-sorted shards per device):");
    let noniid = shard_noniid(&tagged, 5, 2, 42)?;
    histogram(&noniid, &tagged.data.labels, 5);

    Ok(())
}
