use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use kse_lab::config::Experiment;
use kse_lab::run::{run_command, Format, Invocation, EXIT_ACCEPTANCE, EXIT_OK};

/// Stochastic Kuramoto-Sivashinsky laboratory.
///
/// Exit status: 0 success, 1 runtime or i/o failure, 2 invalid
/// configuration, 3 simulation blow-up, 4 failed acceptance criteria.
#[derive(Debug, Parser)]
#[command(name = "kse-lab", version)]
struct Cli {
    /// Experiment to run; must match `experiment` in the config.
    experiment: Experiment,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let inv = Invocation {
        config_path: cli.config,
        seed: cli.seed,
        out: cli.out,
        format: cli.format,
        workers: cli.workers,
        expected: Some(cli.experiment),
    };
    let (code, lines) = run_command(&inv);
    for line in &lines {
        if code == EXIT_OK || code == EXIT_ACCEPTANCE {
            println!("{line}");
        } else {
            eprintln!("{line}");
        }
    }
    ExitCode::from(code)
}
