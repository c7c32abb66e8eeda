//! `gpc`: verification suites, sampling, weight sweeps and bench runs.
//!
//! Exit status is 0 on success, 1 when a verification check (or the
//! computation itself) fails and 2 for configuration or usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gpc_core::config::ExperimentConfig;
use gpc_core::error::Error;
use gpc_core::experiment::{self, RunOutput, Suite};

#[derive(Parser, Debug)]
#[command(name = "gpc", version, about = "Composition of score fields: verification, sampling and weight search")]
struct Cli {
    /// Experiment configuration (TOML). The built-in default is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the configuration.
    #[arg(long, global = true, env = "GPC_SEED")]
    seed: Option<u64>,

    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true, env = "GPC_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run verification suites and write `verify.json`.
    Verify {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(Suite::NAMES), default_value = "all")]
        suite: String,
    },
    /// Sample the configured composition; writes `samples.csv` and `trajectories.jsonl`.
    Sample {
        /// Number of samples (overrides `sampler.samples`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Grid search over the weight of `sweep.first`; writes `pool.csv`, `pool.json` and `sweep.svg`.
    Sweep {
        #[arg(long)]
        grid_step: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Score the configured composition on the bench task; writes `bench.csv` and `bench.json`.
    Bench {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Evaluation(_) | Error::NoUniformBound(_) => Failure::Runtime(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<bool, Failure> {
    if let Command::DefaultConfig = cli.command {
        print!("{}", ExperimentConfig::default().to_toml()?);
        return Ok(true);
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.display().to_string();
    }
    cfg.validate()?;
    let seed = cfg.seed;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Failure::Config("--workers must be at least 1".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Failure::Runtime(e.to_string()))?;

    let output: RunOutput = pool.install(|| -> Result<RunOutput, Failure> {
        Ok(match &cli.command {
            Command::Verify { suite } => {
                let suite: Suite = suite.parse()?;
                let (out, report) = experiment::run_verify(&cfg, suite, seed)?;
                for c in &report.checks {
                    println!("{}", c.line());
                }
                out
            }
            Command::Sample { n } => experiment::run_sample(&cfg, *n, seed)?,
            Command::Sweep { grid_step, episodes } => {
                let out = experiment::run_sweep(&cfg, *grid_step, *episodes, seed)?;
                println!("{}", String::from_utf8_lossy(&out.artifacts[0].bytes).trim_end());
                out
            }
            Command::Bench { episodes } => {
                let out = experiment::run_bench_command(&cfg, *episodes, seed)?;
                println!("{}", String::from_utf8_lossy(&out.artifacts[0].bytes).trim_end());
                out
            }
            Command::DefaultConfig => unreachable!("handled above"),
        })
    })?;

    let dir = PathBuf::from(&cfg.output_dir);
    experiment::write_run(&dir, &cfg, seed, &output)
        .map_err(|e| Failure::Config(format!("cannot write outputs to {}: {e}", dir.display())))?;
    eprintln!("wrote {} artifacts and the manifest to {}", output.artifacts.len(), dir.display());
    Ok(output.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
    }
}
