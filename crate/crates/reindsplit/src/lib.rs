//! Dynamic split learning with a reinforcement-learning orchestrator.
//!
//! A layered neural network is partitioned into `K` client/server submodel
//! pairs. Each simulated edge device carries a stochastic compute capacity and
//! time window; every round a Q-learning agent picks a cut point per device,
//! the device runs the client segment against the parameter server over a
//! binary activation-exchange protocol, and the reward balances accuracy
//! against resource/time feasibility. Infeasible picks are penalized, so the
//! policy learns to keep devices out of the straggler regime.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`config`]: experiment configuration, validation, CLI overrides
//! - [`data`]: synthetic Gaussian-blob datasets and stratified splits
//! - [`metrics`]: classification metrics and min-max normalization
//! - [`splitnet`]: dense network with segmented execution at any cut point
//! - [`agent`]: DQN machinery plus tabular oracles (value iteration,
//!   tabular Q-learning)
//! - [`env`]: heterogeneous-device simulation, feasibility, rewards
//! - [`proto`]: binary wire codec and loopback/stream transports
//! - [`server`]: canonical parameter store behind the wire protocol
//! - [`orchestrator`]: the end-to-end round/episode loop
//! - [`report`]: run directories (rounds.csv, split_freq.csv, summary.json)
//!   and figure-ready report generation
//! - [`oracle`]: independent verification suite (gradient checks, split
//!   equivalence, tabular-policy equivalence, reward fixtures)
//! - [`sweep`]: deterministic hyperparameter grid sweeps
//!
//! See the `examples/` directory for one runnable example per capability and
//! the `reindsplit` binary for the `train`, `oracle`, `sweep`, and `report`
//! subcommands.

pub mod agent;
pub mod cli;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod orchestrator;
pub mod proto;
pub mod report;
pub mod rng;
pub mod server;
pub mod splitnet;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
