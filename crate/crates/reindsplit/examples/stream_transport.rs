//! Transport equivalence: loopback versus localhost sockets.
//!
//! Runs the same seeded experiment over in-process frame queues and over a
//! real TCP server loop on localhost, writes both run directories, and
//! compares rounds.csv byte for byte.
//!
//! ```bash
//! cargo run --release --example stream_transport
//! ```

use reindsplit::config::ExperimentConfig;
use reindsplit::orchestrator::{run_training, TransportConfig};
use reindsplit::report;

fn main() -> reindsplit::Result<()> {
    let cfg = ExperimentConfig {
        episodes: 3,
        steps_per_episode: 15,
        seed: 5,
        ..ExperimentConfig::default()
    };

    let loopback = run_training(&cfg, &TransportConfig::Loopback)?;
    let stream = run_training(
        &cfg,
        &TransportConfig::Stream {
            listen: "127.0.0.1:0".into(),
            connect: None,
        },
    )?;

    let dir = std::env::temp_dir().join("reindsplit-transport-demo");
    let (loop_dir, stream_dir) = (dir.join("loopback"), dir.join("stream"));
    report::write_run_dir(&loop_dir, &loopback)?;
    report::write_run_dir(&stream_dir, &stream)?;

    let a = std::fs::read(loop_dir.join(report::ROUNDS_FILE))?;
    let b = std::fs::read(stream_dir.join(report::ROUNDS_FILE))?;
    println!(
        "loopback rounds.csv: {} bytes\nstream   rounds.csv: {} bytes",
        a.len(),
        b.len()
    );
    println!("byte-identical: {}", a == b);
    assert_eq!(a, b, "transports must not change results");
    println!("run directories under {}", dir.display());
    Ok(())
}
