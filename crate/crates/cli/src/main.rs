use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gcbf::cli::{cmd_bench, cmd_grid, cmd_run, cmd_verify, Suite, EXIT_FAILURE, EXIT_USAGE};
use gcbf::config::{load_config, ScenarioConfig};

/// Gaussian-process control barrier functions: scenario runner and checks.
#[derive(Parser)]
#[command(name = "gcbf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write trace, contour and summary files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run oracle suites: derivatives, moments, rank1, qp, or all.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time synthesis and rectification; writes bench.csv.
    Bench {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export the contour grid of the initial barrier without simulating.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ScenarioConfig, i32> {
    match load_config(path) {
        Ok(mut cfg) => {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Ok(cfg)
        }
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            Err(EXIT_USAGE)
        }
    }
}

fn parse_suites(name: &str) -> Result<Vec<Suite>, i32> {
    if name == "all" {
        return Ok(Suite::ALL.to_vec());
    }
    name.parse().map(|s| vec![s]).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_USAGE
    })
}

fn dispatch(cmd: Command) -> i32 {
    let result = match cmd {
        Command::Run { config, seed, out } => match load(&config, seed) {
            Ok(cfg) => cmd_run(&cfg, out.as_deref()),
            Err(code) => return code,
        },
        Command::Grid { config, seed, out } => match load(&config, seed) {
            Ok(cfg) => cmd_grid(&cfg, out.as_deref()),
            Err(code) => return code,
        },
        Command::Verify { suite, seed } => match parse_suites(&suite) {
            Ok(suites) => cmd_verify(&suites, seed),
            Err(code) => return code,
        },
        Command::Bench { out, seed } => cmd_bench(&out, seed),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_FAILURE
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GCBF_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    ExitCode::from(dispatch(cli.command) as u8)
}
