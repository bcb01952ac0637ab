//! `adiabatic-lab run <config> [--out DIR] [--seed N] [--jobs K]`

mod config;
mod error;
mod experiments;
mod manifest;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adiabatic-lab", version, about = "Run nonlinear adiabatic evolution experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output.directory`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the random search; overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for independent jobs (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

fn main() -> ExitCode {
    let Command::Run { config, out, seed, jobs } = Cli::parse().command;
    let outcome = runner::run(&config, out, seed, jobs);
    match &outcome.error {
        None => println!("ok: manifest at {}", outcome.manifest_path.display()),
        Some(e) => eprintln!("error: {e} (manifest at {})", outcome.manifest_path.display()),
    }
    ExitCode::from(outcome.exit_code)
}
