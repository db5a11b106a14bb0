//! `rep`: configure, run, sweep and verify spectral blow-up computations.

mod commands;
mod config;
mod error;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Invocation;
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "rep",
    version,
    about = "Spectral blow-up analysis of the restricted Euler-Poisson system"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Args {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Directory for output files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write SVG plots (blowup only; needs --out).
    #[arg(long)]
    svg: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate and write the trajectory CSV and a JSON summary.
    Simulate(Args),
    /// Detect blow-up and fit the asymptotic rates.
    Blowup(Args),
    /// Classify the initial data.
    Classify(Args),
    /// Run a parameter grid; one CSV row per point.
    Sweep(Args),
    /// Compare the pipeline against the closed-form family.
    VerifyExample(Args),
    /// Fitted and predicted blow-up rates only.
    Rates(Args),
}

type Handler = fn(&Invocation) -> Result<(), CliError>;

fn dispatch(command: Command) -> Result<(), CliError> {
    let (args, run): (Args, Handler) = match command {
        Command::Simulate(a) => (a, commands::simulate),
        Command::Blowup(a) => (a, commands::blowup),
        Command::Classify(a) => (a, commands::classify_cmd),
        Command::Sweep(a) => (a, commands::sweep),
        Command::VerifyExample(a) => (a, commands::verify_example),
        Command::Rates(a) => (a, commands::rates),
    };
    let config = RunConfig::load(&args.config)?;
    run(&Invocation::new(config, args.out, args.svg)?)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rep: {e}");
            ExitCode::from(e.code())
        }
    }
}
