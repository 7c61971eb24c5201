use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use airq::harness::{recompute_metrics, run_experiment, ExperimentConfig};
use airq::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Truth discovery experiments for vehicular air-quality crowdsensing.
#[derive(Parser)]
#[command(name = "airq", version)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its tables and manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Dump the simulated world as JSON lines.
    GenWorld {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cycles of observations to include (default: all).
        #[arg(long)]
        cycles: Option<usize>,
    },
    /// Recompute the metric tables from a run directory's truths.csv.
    Metrics {
        #[arg(long = "in")]
        input: PathBuf,
        /// Where to write the tables (default: the input directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file and exit.
    ValidateConfig { path: PathBuf },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::Dataset(_) | Error::Parse { .. } => Failure::Config(e),
        _ => Failure::Runtime(e),
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(Failure::Config)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            seed,
            out,
            workers,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate().map_err(Failure::Config)?;
            let record = run_experiment(&cfg).map_err(classify)?;
            record.write(&cfg.out).map_err(Failure::Runtime)?;
            for (algo, c) in &record.counters {
                log::info!("{algo}: {c:?}");
            }
            println!("{}", cfg.out.display());
        }
        Command::GenWorld { config, out, cycles } => {
            let cfg = load(&config)?;
            let world = cfg.build_world().map_err(classify)?;
            let f = File::create(&out).map_err(|e| Failure::Runtime(e.into()))?;
            world
                .dump_jsonl(cycles.unwrap_or(world.cycles), BufWriter::new(f))
                .map_err(Failure::Runtime)?;
        }
        Command::Metrics { input, out } => {
            let out = out.unwrap_or_else(|| input.clone());
            recompute_metrics(&input, &out).map_err(Failure::Runtime)?;
        }
        Command::ValidateConfig { path } => {
            load(&path)?;
            println!("ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("airq: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("airq: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
