//! Command-line interface: `train`, `oracle`, `sweep`, `report`.
//!
//! Exit codes: 0 success, 1 failed verification checks, 2 configuration
//! errors, 3 runtime errors, 4 I/O errors. The `REINDSPLIT_OUT` environment
//! variable sets the default output root.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{validate_config, ExperimentConfig};
use crate::error::{Error, Result};
use crate::oracle;
use crate::orchestrator::{run_training, TransportConfig};
use crate::report;
use crate::splitnet::GradCorruption;
use crate::sweep;

#[derive(Debug, Parser)]
#[command(
    name = "reindsplit",
    version,
    about = "Dynamic split learning with a Q-learning cut-point orchestrator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the training loop and write a run directory.
    Train(TrainArgs),
    /// Run the verification suite (gradient checks, split equivalence,
    /// tabular oracles, reward fixtures).
    Oracle(OracleArgs),
    /// Run a deterministic hyperparameter grid sweep.
    Sweep(SweepArgs),
    /// Aggregate a finished run directory into report.json.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    Loopback,
    Stream,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory to write; defaults to
    /// `$REINDSPLIT_OUT/run-<confighash>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Config override, dotted TOML path (repeatable), e.g.
    /// `--override reward.alpha=2.0`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Transport for device/server traffic.
    #[arg(long, value_enum, default_value_t = TransportKind::Loopback)]
    pub transport: TransportKind,
    /// Stream mode: bind address for the in-process server loop.
    #[arg(long, default_value = "127.0.0.1:0")]
    pub listen: String,
    /// Stream mode: address devices dial (defaults to the bound address).
    #[arg(long)]
    pub connect: Option<String>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Self-test hook: corrupt the backward pass so gradient checks must
    /// fail.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Grid spec (TOML with [base] overrides and [grid] axis lists).
    #[arg(long)]
    pub grid: PathBuf,
    /// Base config the grid perturbs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed override for every trial.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for sweep.csv; defaults to `$REINDSPLIT_OUT`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A run directory produced by `train`.
    #[arg(long)]
    pub run: PathBuf,
}

fn read_config_file(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn load_config(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<ExperimentConfig> {
    let raw = match config {
        Some(path) => read_config_file(path)?,
        None => String::new(),
    };
    let mut all = overrides.to_vec();
    if let Some(seed) = seed {
        all.push(format!("seed={seed}"));
    }
    validate_config(&raw, &all)
}

fn output_root() -> PathBuf {
    std::env::var_os("REINDSPLIT_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed, &args.overrides)?;
    let transport = match args.transport {
        TransportKind::Loopback => TransportConfig::Loopback,
        TransportKind::Stream => TransportConfig::Stream {
            listen: args.listen.clone(),
            connect: args.connect.clone(),
        },
    };
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| output_root().join(format!("run-{:016x}", cfg.config_hash())));

    let artifacts = run_training(&cfg, &transport)?;
    report::write_run_dir(&dir, &artifacts)?;

    let last = artifacts.episodes.last();
    println!("run directory: {}", dir.display());
    println!(
        "episodes: {}  device-steps: {}  feasible: {}",
        artifacts.episodes.len(),
        artifacts.transitions_pushed,
        artifacts.feasible_steps
    );
    println!(
        "final test metrics: accuracy {:.4}  macro-f1 {:.4}  mcc {:.4}",
        artifacts.final_metrics.accuracy,
        artifacts.final_metrics.macro_f1,
        artifacts.final_metrics.mcc
    );
    if let Some(ep) = last {
        println!(
            "last episode: straggler rate {:.4}  mean reward {:.4}  mean val acc {:.4}",
            ep.straggler_rate, ep.mean_reward, ep.mean_val_acc
        );
    }
    println!("wall time: {:.2}s", artifacts.wall_time_seconds);
    Ok(())
}

/// Runs the verification suite; returns the number of failed checks.
pub fn cmd_oracle(args: &OracleArgs) -> Result<usize> {
    let corruption = if args.corrupt_backward {
        GradCorruption::SignFlip
    } else {
        GradCorruption::None
    };
    let results = oracle::run_suite(corruption)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = 0;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:width$}  {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    println!(
        "{} checks, {} failed{}",
        results.len(),
        failed,
        if args.corrupt_backward {
            " (corruption self-test)"
        } else {
            ""
        }
    );
    Ok(failed)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = load_config(&args.config, args.seed, &args.overrides)?;
    let grid_text = read_config_file(&args.grid)?;
    let spec = sweep::parse_grid(&grid_text)?;
    let rows = sweep::run_sweep(&base, &spec)?;

    let dir = args.out.clone().unwrap_or_else(output_root);
    fs::create_dir_all(&dir)?;
    let path = dir.join("sweep.csv");
    fs::write(&path, sweep::sweep_csv(&rows))?;

    println!("{}", sweep::SWEEP_HEADER);
    for r in &rows {
        println!(
            "{},{:.3e},{:.3e},{:.3},{},{},{:.4},{:.4},{:.4}",
            r.config_hash,
            r.lr,
            r.weight_decay,
            r.discount,
            r.batch_size,
            r.target_sync_every,
            r.final_accuracy,
            r.mean_reward,
            r.straggler_rate
        );
    }
    println!("{} trials -> {}", rows.len(), path.display());
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let (report, path) = report::write_report(&args.run)?;
    println!("report: {}", path.display());
    println!(
        "normalized metrics: accuracy {:.3} precision {:.3} recall {:.3} f1 {:.3} mcc {:.3}",
        report.normalized_metrics.accuracy,
        report.normalized_metrics.macro_precision,
        report.normalized_metrics.macro_recall,
        report.normalized_metrics.macro_f1,
        report.normalized_metrics.mcc
    );
    println!(
        "straggler rate: first10 {:.4}  last10 {:.4}  ratio {}",
        report.straggler.first10,
        report.straggler.last10,
        report
            .straggler
            .ratio
            .map(|r| format!("{r:.4}"))
            .unwrap_or_else(|| "n/a".into())
    );
    println!("split totals: {:?}", report.split_frequency_totals);
    Ok(())
}

/// Top-level dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome: Result<i32> = match &cli.command {
        Command::Train(args) => cmd_train(args).map(|()| 0),
        Command::Oracle(args) => cmd_oracle(args).map(|failed| i32::from(failed > 0)),
        Command::Sweep(args) => cmd_sweep(args).map(|()| 0),
        Command::Report(args) => cmd_report(args).map(|()| 0),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
