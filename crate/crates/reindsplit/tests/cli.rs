//! End-to-end tests of the `reindsplit` binary: exit codes, run-directory
//! contents, determinism of the emitted files, and the sweep/report flows.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reindsplit"))
}

fn run(args: &[&str]) -> Output {
    binary().args(args).output().expect("binary runs")
}

const SMALL: &[&str] = &[
    "--override",
    "episodes=2",
    "--override",
    "steps_per_episode=5",
    "--override",
    "n_devices=2",
    "--override",
    "batch_size=8",
    "--override",
    "data.samples=150",
];

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--seed", "7", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let result = run(&args);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    for file in ["config.toml", "rounds.csv", "split_freq.csv", "summary.json"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let rounds = fs::read_to_string(out.join("rounds.csv")).unwrap();
    // Header plus episodes * steps * devices rows.
    assert_eq!(rounds.lines().count(), 1 + 2 * 5 * 2);
}

#[test]
fn same_seed_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec!["train", "--seed", "7", "--out", out.to_str().unwrap()];
        args.extend_from_slice(SMALL);
        let result = run(&args);
        assert!(result.status.success());
    }
    let bytes_a = fs::read(a.join("rounds.csv")).unwrap();
    let bytes_b = fs::read(b.join("rounds.csv")).unwrap();
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(
        fs::read(a.join("split_freq.csv")).unwrap(),
        fs::read(b.join("split_freq.csv")).unwrap()
    );
}

#[test]
fn stream_transport_produces_identical_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("loop"), dir.path().join("stream"));
    let mut base = vec!["train", "--seed", "3"];
    base.extend_from_slice(SMALL);

    let mut args = base.clone();
    args.extend(["--out", a.to_str().unwrap()]);
    assert!(run(&args).status.success());

    let mut args = base;
    args.extend([
        "--out",
        b.to_str().unwrap(),
        "--transport",
        "stream",
        "--listen",
        "127.0.0.1:0",
    ]);
    let result = run(&args);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));

    assert_eq!(
        fs::read(a.join("rounds.csv")).unwrap(),
        fs::read(b.join("rounds.csv")).unwrap()
    );
}

#[test]
fn missing_config_exits_4_with_path() {
    let result = run(&["train", "--config", "/no/such/file.toml"]);
    assert_eq!(result.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("/no/such/file.toml"), "{stderr}");
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let result = run(&["train", "--override", "unavailability_prob=1.5"]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("unavailability_prob"), "{stderr}");

    let result = run(&["train", "--override", "capacity_range=[7.5, 0.5]"]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("low >= high"), "{stderr}");
}

#[test]
fn oracle_passes_clean_and_fails_corrupted() {
    let clean = run(&["oracle"]);
    assert_eq!(clean.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&clean.stdout);
    assert!(stdout.contains("PASS"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");

    let corrupted = run(&["oracle", "--corrupt-backward"]);
    assert_eq!(corrupted.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&corrupted.stdout);
    assert!(stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn sweep_runs_grid_and_report_consumes_run_dir() {
    let dir = tempfile::tempdir().unwrap();

    let grid = dir.path().join("grid.toml");
    fs::write(
        &grid,
        r#"
[base]
episodes = 1
steps_per_episode = 4
n_devices = 2
batch_size = 8

[grid]
discount = [0.95, 0.99, 0.999]
"#,
    )
    .unwrap();
    let result = run(&[
        "sweep",
        "--grid",
        grid.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "data.samples=150",
    ]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus one row per discount:\n{csv}");

    // Report over a training run.
    let run_dir = dir.path().join("run");
    let mut args = vec!["train", "--seed", "5", "--out", run_dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    assert!(run(&args).status.success());
    let result = run(&["report", "--run", run_dir.to_str().unwrap()]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    assert!(run_dir.join("report.json").exists());

    // Re-running the report is idempotent.
    let before = fs::read(run_dir.join("report.json")).unwrap();
    assert!(run(&["report", "--run", run_dir.to_str().unwrap()]).status.success());
    assert_eq!(before, fs::read(run_dir.join("report.json")).unwrap());
}

#[test]
fn report_on_missing_directory_exits_4() {
    let result = run(&["report", "--run", "/no/such/run"]);
    assert_eq!(result.status.code(), Some(4));
}

#[test]
fn out_root_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = binary();
    cmd.env("REINDSPLIT_OUT", dir.path());
    cmd.args(["train", "--seed", "11"]);
    cmd.args(SMALL);
    let result = cmd.output().unwrap();
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1, "one run directory under the env root");
    let run_dir = entries[0].as_ref().unwrap().path();
    assert!(Path::new(&run_dir).join("rounds.csv").exists());
}
