use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedecho::metrics::{mean_std, read_accuracies, RunSummary};

const BIN: &str = env!("CARGO_BIN_EXE_fedecho");

const TINY: &str = r#"
seed = 2
[dataset]
generator = "gaussian_mixture"
classes = 3
dim = 4
n_train = 60
n_test = 30
n_unlabeled = 20
[federation]
clients = 1
concurrency = 1
buffer = 1
rounds = 1
eval_every = 1
[local]
batch_size = 10
[distill]
batch_size = 10
"#;

const SMALL: &str = r#"
seed = 4
replicates = 3
[dataset]
generator = "gaussian_mixture"
classes = 3
dim = 4
n_train = 150
n_test = 60
n_unlabeled = 30
[federation]
clients = 6
concurrency = 3
buffer = 2
rounds = 6
eval_every = 3
[local]
batch_size = 10
[distill]
batch_size = 10
eta_d = 0.01
"#;

fn fedecho(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn run_into(config: &str, out: &Path) {
    let o = fedecho(&["run", config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn single_round_run_writes_one_metrics_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    run_into(&cfg, &out);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let events = fs::read_to_string(out.join("events.csv")).unwrap();
    assert_eq!(events.lines().count(), 2);
    let summary = RunSummary::from_json(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.seeds.len(), 1);
    assert_eq!(summary.tau_max, 0);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_into(&cfg, &a);
    run_into(&cfg, &b);
    for seed in [4, 5, 6] {
        for file in ["metrics.csv", "events.csv"] {
            let rel = format!("seed-{seed}/{file}");
            assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap(), "{rel}");
        }
    }
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());
}

#[test]
fn summary_statistics_match_per_seed_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    run_into(&cfg, &out);
    let summary = RunSummary::from_json(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.seeds.len(), 3);
    let finals: Vec<f64> = summary
        .seeds
        .iter()
        .map(|s| {
            let rows = read_accuracies(fs::File::open(out.join(&s.metrics_file)).unwrap()).unwrap();
            let (round, acc) = *rows.last().unwrap();
            assert_eq!(round, 6);
            assert_eq!(acc, s.final_accuracy);
            acc
        })
        .collect();
    let (mean, std) = mean_std(&finals);
    assert_eq!(summary.accuracy_mean, mean);
    assert_eq!(summary.accuracy_std, std);
}

#[test]
fn verify_exit_codes() {
    let ok = fedecho(&["verify", "grad-fd", "--trials", "5"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    assert_eq!(fedecho(&["verify", "no-such-check"]).status.code(), Some(2));
    assert_eq!(fedecho(&["verify", "clip", "--trials", "0"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("buffer = 1", "buffer = 2"));
    let o = fedecho(&["run", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("buffer"));
}

#[test]
fn sweep_writes_one_directory_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    let o = fedecho(&[
        "sweep",
        &cfg,
        "--grid",
        "distill.alpha=0,dynamic",
        "--grid",
        "distill.nu=1,inf",
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("run,distill.alpha,distill.nu,algorithm"));
    assert!(lines[1].starts_with("run-000,0,1,"));
    assert!(lines[4].starts_with("run-003,dynamic,inf,"));
    for i in 0..4 {
        assert!(out.join(format!("run-{i:03}/summary.json")).is_file());
    }
}

#[test]
fn sweep_without_grid_runs_base_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    let o = fedecho(&["sweep", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(out.join("run-000/metrics.csv").is_file());
}

#[test]
fn unknown_sweep_key_fails_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    let o = fedecho(&["sweep", &cfg, "--grid", "local.nope=1,2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("run-000").exists());
}
