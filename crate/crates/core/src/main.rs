use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use svrpf::harness::{run_experiment, run_sweep, validate, ExperimentConfig};

#[derive(Parser)]
#[command(name = "svrpf", about = "Particle filter benchmarks with SVR particle migration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo experiment and write steps.csv and summary.csv.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat the experiment over particle counts and write sweep.csv.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated ascending particle counts; defaults to `sweep.n`.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the reduced property suite and print one line per check.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load(config: Option<&PathBuf>, seed: Option<u64>, out: Option<PathBuf>) -> svrpf::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config.map(|p| p.as_path()), |k| std::env::var(k).ok())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> svrpf::Result<bool> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load(config.as_ref(), seed, out)?;
            let bundle = run_experiment(&cfg)?;
            bundle.write(&cfg.out)?;
            print!("{}", bundle.summary_csv);
            Ok(true)
        }
        Command::Sweep { config, n, seed, out } => {
            let cfg = load(config.as_ref(), seed, out)?;
            let ns = n.unwrap_or_else(|| cfg.sweep_n.clone());
            let csv = run_sweep(&cfg, &ns)?;
            std::fs::create_dir_all(&cfg.out)?;
            std::fs::write(cfg.out.join("sweep.csv"), &csv)?;
            print!("{csv}");
            Ok(true)
        }
        Command::Validate { config } => {
            let cfg = load(config.as_ref(), None, None)?;
            let report = validate(&cfg)?;
            print!("{}", report.render());
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
