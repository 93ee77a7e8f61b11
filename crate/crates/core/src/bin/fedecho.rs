use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedecho::config::{load_table, RunConfig};
use fedecho::runner::{parse_grid, resolve_output_dir, run, sweep, under_output_root, GridAxis, RunOptions};
use fedecho::verify::{verify, VerifyKind};
use fedecho::Error;

/// Exit status when a verification suite fails.
const VERIFY_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "fedecho", version, about = "Asynchronous federated learning simulator with server distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration and write metrics.csv, events.csv and summary.json.
    Run {
        config: PathBuf,
        /// Output directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the generated dataset in binary form.
        #[arg(long)]
        save_dataset: bool,
    },
    /// Run a randomized property suite.
    Verify {
        #[arg(value_parser = parse_kind)]
        kind: VerifyKind,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the cross product of override grids over a base configuration.
    Sweep {
        config: PathBuf,
        /// `key=v1,v2,...`; repeatable.
        #[arg(long = "grid", value_parser = parse_axis)]
        grids: Vec<GridAxis>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel runs (defaults to available cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn parse_kind(s: &str) -> Result<VerifyKind, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = VerifyKind::ALL.iter().map(|k| k.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_axis(s: &str) -> Result<GridAxis, String> {
    parse_grid(s).map_err(|e| e.to_string())
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, out, save_dataset } => {
            let cfg = match RunConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let dir = resolve_output_dir(&cfg, Some(&config), out.as_deref());
            match run(&cfg, &dir, RunOptions { save_dataset }) {
                Ok(s) => {
                    println!(
                        "{}: accuracy {:.4} ± {:.4} over {} seed(s), tau_max {}, tau_avg {:.2}; wrote {}",
                        s.algorithm,
                        s.accuracy_mean,
                        s.accuracy_std,
                        s.seeds.len(),
                        s.tau_max,
                        s.tau_avg_mean,
                        dir.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Verify { kind, trials, seed } => match verify(kind, trials, seed) {
            Ok(report) => {
                print!("{report}");
                if report.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(VERIFY_FAILED)
                }
            }
            Err(e) => fail(e),
        },
        Command::Sweep { config, grids, out, jobs } => {
            let result = load_table(&config).and_then(|table| {
                RunConfig::from_table(table.clone())?;
                let dir = out.unwrap_or_else(|| {
                    let stem = config.file_stem().map_or("sweep".into(), |s| s.to_string_lossy().into_owned());
                    under_output_root(PathBuf::from("runs").join(format!("{stem}-sweep")))
                });
                let workers = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
                sweep(&table, &grids, &dir, workers).map(|rows| (rows, dir))
            });
            match result {
                Ok((rows, dir)) => {
                    for r in &rows {
                        let keys: Vec<String> = r
                            .overrides
                            .iter()
                            .map(|(k, v)| format!("{k}={}", fedecho::runner::value_label(v)))
                            .collect();
                        println!("{} [{}] accuracy {:.4}", r.dir, keys.join(" "), r.summary.accuracy_mean);
                    }
                    println!("wrote {}", dir.join(fedecho::runner::AGGREGATE_FILE).display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
