use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedpai::config::{load_config, DatasetConfig};
use fedpai::data::{partition_dirichlet, partition_iid, partition_stats};
use fedpai::grid::{run_grid, GridOptions};
use fedpai::{curves, Error};

/// Environment variable that replaces the configured output directory.
const OUTPUT_ROOT_ENV: &str = "FEDPAI_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "fedpai",
    version,
    about = "Federated pruning-at-initialization simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment grid.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config and the environment.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Cells run in parallel (0 = one per core).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Re-run cells already marked done.
        #[arg(long)]
        force: bool,
    },
    /// Turn per-cell CSVs into gnuplot data and SVG charts.
    Curves {
        /// A results directory or a single CSV file.
        input: PathBuf,
        /// Defaults to `<input>/plots`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
    /// Print Dirichlet skew statistics for a partition.
    PartitionStats {
        /// Dirichlet concentration; omit for an IID split.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 100)]
        clients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take the dataset from this config instead of the default synthetic one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn output_root(explicit: Option<PathBuf>, configured: &Path) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| configured.to_path_buf())
}

fn config_only(path: &Path) -> Result<fedpai::config::ExperimentConfig, Failure> {
    load_config(path).map_err(|e| match e {
        Error::Io(io) => Failure::Config(format!("cannot read {}: {io}", path.display())),
        other => Failure::Config(other.to_string()),
    })
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            output,
            jobs,
            force,
        } => {
            let cfg = config_only(&config)?;
            let out = output_root(output, &cfg.output_dir);
            let summary = run_grid(&cfg, &out, &GridOptions { jobs, force })?;
            println!(
                "{} cells: {} run, {} skipped, {} failed; manifest at {}",
                summary.total,
                summary.executed,
                summary.skipped,
                summary.failed,
                out.join(fedpai::grid::MANIFEST).display()
            );
            if summary.failed > 0 {
                return Err(Failure::Runtime(format!("{} cells failed", summary.failed)));
            }
        }
        Command::Curves { input, output } => {
            let out = output.unwrap_or_else(|| input.join("plots"));
            for p in curves::write_curves(&input, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Validate { config } => {
            let cfg = config_only(&config)?;
            println!(
                "ok: {} cells ({} strategies x {} kappa x {} alpha x {} seeds)",
                cfg.cells().len(),
                cfg.strategy.len(),
                cfg.kappas().len(),
                cfg.alpha_settings().len(),
                cfg.seeds.len()
            );
        }
        Command::PartitionStats {
            alpha,
            clients,
            seed,
            config,
        } => {
            let dataset = match config {
                Some(p) => config_only(&p)?.dataset,
                None => DatasetConfig::default(),
            };
            if let Some(a) = alpha {
                if !(a.is_finite() && a > 0.0) {
                    return Err(Failure::Config(format!("alpha must be > 0, got {a}")));
                }
            }
            if clients == 0 {
                return Err(Failure::Config("clients must be >= 1, got 0".into()));
            }
            let train = dataset.source().load()?.train;
            let plan = match alpha {
                Some(a) => partition_dirichlet(&train, clients, a, seed)?,
                None => partition_iid(&train, clients, seed)?,
            };
            let stats = partition_stats(&plan, &train);
            println!(
                "{}",
                serde_json::to_string_pretty(&stats)
                    .map_err(|e| Failure::Runtime(e.to_string()))?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
