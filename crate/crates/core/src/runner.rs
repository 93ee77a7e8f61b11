//! Seeded end-to-end runs, output files, and parameter sweeps.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use toml::{Table, Value};

use crate::algorithms::{build_server, LocalTrainer};
use crate::config::{apply_override, check_key, parse_value, RunConfig};
use crate::data::{dirichlet_partition, generate, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, write_events_csv, write_metrics_csv, MetricsRecord, RunSummary, SeedSummary, SUMMARY_SCHEMA_VERSION};
use crate::model::{ce_loss_and_grad, evaluate, Batch, Evaluation, ModelParams};
use crate::rng::RngStream;
use crate::simulator::{assign_categories, Category, DelayProfile, DelayStats, EventRecord, Simulation, SimulationSetup};
use crate::tensor::l2_norm;

/// Environment variable that relocates every relative output directory.
pub const OUTPUT_ROOT_ENV: &str = "FEDECHO_OUTPUT_ROOT";

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DATASET_FILE: &str = "dataset.bin";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

/// Everything one seeded run produced, kept in memory.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub algorithm: &'static str,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<EventRecord>,
    pub final_model: ModelParams,
    pub final_eval: Evaluation,
    pub delay: DelayStats,
    pub categories: Vec<Category>,
    pub max_checkpoints: usize,
    pub reconstruction_mismatches: u64,
    pub clock: f64,
}

/// Dataset, client shards and delay tiers for one seed.
pub struct Prepared {
    pub dataset: Dataset,
    pub shards: Vec<Batch>,
    pub categories: Vec<Category>,
}

pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let spec = cfg.dataset_spec()?;
    let dataset = generate(&spec, seed)?;
    let n = cfg.federation.clients;
    let partition = dirichlet_partition(
        dataset.train.labels(),
        n,
        cfg.federation.alpha_dir,
        &mut RngStream::named(seed, "partition", 0),
    )?;
    let shards = partition
        .client_indices
        .iter()
        .map(|idx| dataset.train.select(idx))
        .collect::<Result<Vec<_>>>()?;
    let categories = assign_categories(
        &partition.sizes(),
        &cfg.delay_profile(),
        &mut RngStream::named(seed, "categories", 0),
    )?;
    Ok(Prepared { dataset, shards, categories })
}

fn grad_norm(model: &ModelParams, train: &Batch) -> Result<f64> {
    Ok(l2_norm(&ce_loss_and_grad(model, train)?.1))
}

/// Runs one seed entirely in memory.
pub fn execute(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let Prepared { dataset, shards, categories } = prepare(cfg, seed)?;
    let arch = cfg.architecture()?;
    let algo = cfg.algo_config();
    let initial = ModelParams::init(arch, &mut RngStream::named(seed, "init", 0))?;
    let server = build_server(
        &algo,
        arch.param_count(),
        cfg.federation.clients,
        &dataset.unlabeled,
        dataset.classes,
        seed,
    );
    let trainer = LocalTrainer { shards, cfg: algo, seed };
    let setup = SimulationSetup {
        num_clients: cfg.federation.clients,
        concurrency: cfg.federation.concurrency,
        buffer_size: cfg.federation.buffer,
        categories: categories.clone(),
        profile: cfg.delay_profile(),
        runtime_mode: cfg.delay.runtime_mode,
        seed,
    };
    let mut sim = Simulation::new(setup, initial, server, Box::new(trainer))?;
    let algorithm = sim.algorithm_name();

    let rounds = cfg.federation.rounds;
    let eval_every = cfg.federation.eval_every;
    let mut metrics = Vec::new();
    let mut events = Vec::new();
    let mut tau_max = 0;
    sim.run_rounds(rounds, |_, report| {
        let mut pending_rounds = report.rounds.iter();
        for e in &report.events {
            tau_max = tau_max.max(e.tau);
            events.push(e.clone());
            if !e.global_update {
                continue;
            }
            let r = pending_rounds.next().expect("one round record per triggering arrival");
            if r.round % eval_every != 0 && r.round != rounds {
                continue;
            }
            let eval = evaluate(&r.model, &dataset.test)?;
            metrics.push(MetricsRecord {
                round: r.round,
                clock: r.clock,
                test_accuracy: eval.accuracy,
                test_loss: eval.mean_loss,
                train_grad_norm: grad_norm(&r.model, &dataset.train)?,
                tau_max_so_far: tau_max,
                round_tau: r.max_tau,
                alpha_mean: r.stats.alpha_mean,
                entropy_mean: r.stats.entropy_mean,
                buffer_events: e.event + 1,
                checkpoints: r.checkpoints,
            });
        }
        Ok(())
    })?;

    let final_model = sim.state().global.clone();
    Ok(SeedRun {
        seed,
        algorithm,
        metrics,
        events,
        final_eval: evaluate(&final_model, &dataset.test)?,
        final_model,
        delay: sim.delay_stats()?,
        categories,
        max_checkpoints: sim.state().max_checkpoints_seen(),
        reconstruction_mismatches: sim.reconstruction_mismatches(),
        clock: sim.state().clock,
    })
}

/// Human-readable record of how sample counts map to delay tiers.
pub fn category_rule(profile: &DelayProfile) -> String {
    format!(
        "clients sorted by w*rank(sample count) + (1-w)*U[0,1) with w = 1/(1+gamma), gamma = {}; \
         top floor({}*N) long, next floor({}*N) medium, rest short",
        profile.gamma, profile.max_long_fraction, profile.medium_fraction
    )
}

/// Resolves where a run writes: an explicit directory wins, then the
/// config's `output_dir`, then `runs/<config stem>`. Relative results are
/// placed under `$FEDECHO_OUTPUT_ROOT` when that variable is set.
pub fn resolve_output_dir(cfg: &RunConfig, config_path: Option<&Path>, explicit: Option<&Path>) -> PathBuf {
    let base = explicit.map(Path::to_path_buf).or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
        let stem = config_path
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string());
        PathBuf::from("runs").join(stem)
    });
    if explicit.is_some() {
        base
    } else {
        under_output_root(base)
    }
}

/// Prefixes a relative path with `$FEDECHO_OUTPUT_ROOT` when it is set.
pub fn under_output_root(path: PathBuf) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Also write each seed's generated dataset in the binary format.
    pub save_dataset: bool,
}

/// Runs every replicate and writes the run directory.
///
/// A single seed writes `metrics.csv`, `events.csv` and `summary.json`
/// directly into `out_dir`; several seeds get a `seed-<s>/` directory each
/// with a shared `summary.json` on top.
pub fn run(cfg: &RunConfig, out_dir: &Path, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let seeds = cfg.seeds();
    let multi = seeds.len() > 1;
    let mut per_seed = Vec::new();
    let mut algorithm = "";
    for seed in seeds {
        let dir = if multi { out_dir.join(format!("seed-{seed}")) } else { out_dir.to_path_buf() };
        create_dir(&dir)?;
        info!("running seed {seed} into {}", dir.display());
        let r = execute(cfg, seed)?;
        algorithm = r.algorithm;
        write_metrics_csv(create_file(&dir.join(METRICS_FILE))?, &r.metrics)?;
        write_events_csv(create_file(&dir.join(EVENTS_FILE))?, &r.events)?;
        if opts.save_dataset {
            let data = generate(&cfg.dataset_spec()?, seed)?;
            let mut w = create_file(&dir.join(DATASET_FILE))?;
            write_dataset(&mut w, &data)?;
        }
        let rel = if multi { format!("seed-{seed}/{METRICS_FILE}") } else { METRICS_FILE.to_string() };
        per_seed.push(SeedSummary {
            seed,
            final_accuracy: r.final_eval.accuracy,
            final_loss: r.final_eval.mean_loss,
            tau_max: r.delay.tau_max,
            tau_avg: r.delay.tau_avg,
            max_checkpoints: r.max_checkpoints,
            reconstruction_mismatches: r.reconstruction_mismatches,
            events: r.events.len() as u64,
            clock: r.clock,
            metrics_file: rel,
        });
    }
    let accs: Vec<f64> = per_seed.iter().map(|s| s.final_accuracy).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&accs);
    let tau_avgs: Vec<f64> = per_seed.iter().map(|s| s.tau_avg).collect();
    let summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        algorithm: algorithm.to_string(),
        rounds: cfg.federation.rounds,
        accuracy_mean,
        accuracy_std,
        tau_max: per_seed.iter().map(|s| s.tau_max).max().unwrap_or(0),
        tau_avg_mean: mean_std(&tau_avgs).0,
        category_rule: category_rule(&cfg.delay_profile()),
        seeds: per_seed,
        config: cfg.to_toml_string(),
    };
    write_text(&out_dir.join(SUMMARY_FILE), &summary.to_json()?)?;
    Ok(summary)
}

/// One `key=v1,v2,...` sweep axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<Value>,
}

pub fn parse_grid(spec: &str) -> Result<GridAxis> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("grid '{spec}' is not of the form key=v1,v2")))?;
    let key = key.trim();
    let values: Vec<Value> = values.split(',').filter(|v| !v.trim().is_empty()).map(parse_value).collect();
    if key.is_empty() || values.is_empty() {
        return Err(Error::config(format!("grid '{spec}' needs a key and at least one value")));
    }
    Ok(GridAxis { key: key.to_string(), values })
}

/// Text form of a grid value for tables and directory names.
pub fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Every combination of the axes, first axis varying slowest.
pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<(String, Value)>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub dir: String,
    pub overrides: Vec<(String, Value)>,
    pub summary: RunSummary,
}

/// Runs the cross product of `axes` over `base`, one directory per point,
/// and writes `aggregate.csv`. Keys are checked before anything runs.
pub fn sweep(base: &Table, axes: &[GridAxis], out_dir: &Path, workers: usize) -> Result<Vec<SweepRow>> {
    for axis in axes {
        for v in &axis.values {
            check_key(base, &axis.key, v)?;
        }
    }
    let points = grid_points(axes);
    let configs = points
        .iter()
        .map(|p| {
            let mut t = base.clone();
            for (k, v) in p {
                apply_override(&mut t, k, v.clone())?;
            }
            RunConfig::from_table(t)
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out_dir)?;

    let dirs: Vec<String> = (0..points.len()).map(|i| format!("run-{i:03}")).collect();
    let results: Vec<Mutex<Option<Result<RunSummary>>>> = (0..points.len()).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, points.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= points.len() {
                    break;
                }
                let r = run(&configs[i], &out_dir.join(&dirs[i]), RunOptions::default());
                *results[i].lock().expect("no poisoned runs") = Some(r);
            });
        }
    });

    let mut rows = Vec::new();
    for ((dir, overrides), slot) in dirs.into_iter().zip(points).zip(results) {
        let summary = slot.into_inner().expect("no poisoned runs").expect("every point ran")?;
        rows.push(SweepRow { dir, overrides, summary });
    }
    write_aggregate(&out_dir.join(AGGREGATE_FILE), axes, &rows)?;
    Ok(rows)
}

fn write_aggregate(path: &Path, axes: &[GridAxis], rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    let mut header = vec!["run".to_string()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(["algorithm", "accuracy_mean", "accuracy_std", "tau_max", "tau_avg_mean"].map(String::from));
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.dir.clone()];
        rec.extend(row.overrides.iter().map(|(_, v)| value_label(v)));
        rec.extend([
            row.summary.algorithm.clone(),
            crate::metrics::format_float(row.summary.accuracy_mean),
            crate::metrics::format_float(row.summary.accuracy_std),
            row.summary.tau_max.to_string(),
            crate::metrics::format_float(row.summary.tau_avg_mean),
        ]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_table;

    const SMALL: &str = r#"
        seed = 3
        [dataset]
        generator = "gaussian_mixture"
        classes = 3
        dim = 4
        n_train = 120
        n_test = 60
        n_unlabeled = 30
        [federation]
        clients = 6
        concurrency = 3
        buffer = 2
        rounds = 5
        eval_every = 2
        [local]
        batch_size = 10
        [distill]
        batch_size = 10
        eta_d = 0.01
    "#;

    #[test]
    fn evaluation_rows_follow_schedule() {
        let cfg = RunConfig::from_toml_str(SMALL).unwrap();
        let r = execute(&cfg, 3).unwrap();
        let rounds: Vec<u64> = r.metrics.iter().map(|m| m.round).collect();
        assert_eq!(rounds, vec![2, 4, 5]);
        assert_eq!(r.reconstruction_mismatches, 0);
        assert!(r.max_checkpoints <= 4);
        assert_eq!(r.events.iter().filter(|e| e.global_update).count(), 5);
        assert_eq!(r.metrics.last().unwrap().test_accuracy, r.final_eval.accuracy);
    }

    #[test]
    fn execution_is_a_function_of_config_and_seed() {
        let cfg = RunConfig::from_toml_str(SMALL).unwrap();
        let (a, b) = (execute(&cfg, 9).unwrap(), execute(&cfg, 9).unwrap());
        assert_eq!(a.final_model, b.final_model);
        assert_eq!(a.metrics, b.metrics);
        assert_ne!(execute(&cfg, 10).unwrap().final_model, a.final_model);
    }

    #[test]
    fn grid_cross_product_order() {
        let axes = vec![parse_grid("a=1,2").unwrap(), parse_grid("b=x,y,z").unwrap()];
        let pts = grid_points(&axes);
        assert_eq!(pts.len(), 6);
        assert_eq!(value_label(&pts[1][1].1), "y");
        assert_eq!(value_label(&pts[3][0].1), "2");
        assert_eq!(grid_points(&[]), vec![Vec::new()]);
    }

    #[test]
    fn malformed_grids() {
        assert!(parse_grid("novalue").is_err());
        assert!(parse_grid("k=").is_err());
        assert_eq!(parse_grid("distill.nu=1,5,inf").unwrap().values.len(), 3);
    }

    #[test]
    fn unknown_sweep_key_fails_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let base = parse_table(SMALL).unwrap();
        let err = sweep(&base, &[parse_grid("distill.bogus=1,2").unwrap()], dir.path(), 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(!dir.path().join(AGGREGATE_FILE).exists());
    }

    #[test]
    fn explicit_output_dir_wins() {
        let cfg = RunConfig::from_toml_str(SMALL).unwrap();
        let p = resolve_output_dir(&cfg, Some(Path::new("conf/x.toml")), Some(Path::new("/tmp/out")));
        assert_eq!(p, PathBuf::from("/tmp/out"));
    }
}
