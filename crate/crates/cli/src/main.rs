use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use error::CliError;

/// Function-on-function quadratic regression with Gaussian-process errors.
#[derive(Debug, Parser)]
#[command(name = "funquad", version, about)]
struct Cli {
    /// Worker threads for the parallel sections (all cores by default).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,

    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,

    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one model and export the coefficient surfaces.
    Fit(Common),
    /// Fit a (M_y, lambda) grid and keep the criterion minimizer.
    Select(Common),
    /// Predict response curves for new predictor curves.
    Predict(Common),
    /// Run the Monte Carlo comparison of estimators.
    Simulate(Common),
    /// Smooth raw curves onto a basis.
    Smooth(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    match cli.command {
        Command::Fit(c) => commands::cmd_fit(&c.config, &c.out, c.seed),
        Command::Select(c) => commands::cmd_select(&c.config, &c.out, c.seed),
        Command::Predict(c) => commands::cmd_predict(&c.config, &c.out, c.seed),
        Command::Simulate(c) => commands::cmd_simulate(&c.config, &c.out, c.seed),
        Command::Smooth(c) => commands::cmd_smooth(&c.config, &c.out, c.seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
