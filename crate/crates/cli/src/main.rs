//! `xmzsr` command-line interface.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xmzsr::dataio::Protocol;
use xmzsr::Error;

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "xmzsr", version, about = "Zero-shot sketch-based retrieval on feature vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for data generation, the split and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Restrict evaluation to one protocol.
    #[arg(long, global = true, value_parser = parse_protocol)]
    protocol: Option<Protocol>,

    /// Override a config leaf, e.g. `--set train.epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Ablation rows trained concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic feature table and class-embedding table.
    GenData,
    /// Train and write a checkpoint plus per-epoch loss history.
    Train,
    /// Evaluate a checkpoint under ZS and/or GZS.
    Eval,
    /// Train and evaluate every ablation row.
    Ablate,
    /// Collect results into long-format plot data.
    Report,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingInput(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn run(cli: &Cli) -> xmzsr::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        protocol: cli.protocol,
        jobs: cli.jobs,
        set: cli.set.clone(),
    };
    // eval picks up the config that train saved next to the checkpoint
    let saved = cli.out.clone().unwrap_or_else(|| RunConfig::default().out).join("config.json");
    let config = match (&cli.config, cli.command) {
        (Some(p), _) => Some(p.clone()),
        (None, Command::Eval) if saved.exists() => Some(saved),
        _ => None,
    };
    let cfg = RunConfig::resolve(config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XMZSR_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
