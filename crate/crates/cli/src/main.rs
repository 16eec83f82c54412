use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use commands::{RunDir, RunLock};
use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "crossmag", version, about = "Cross-magnification distillation pipeline")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides global.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides global.run_dir.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides global.log_level (error, warn, info, debug, trace).
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate synthetic slides and the pyramid manifest under data/.
    Synth,
    /// Distill the 5x student from the frozen 20x teacher.
    Distill,
    /// Attention MIL on frozen embeddings of the delivered encoder.
    Mil,
    /// End-to-end MIL with the last k encoder blocks trainable.
    E2e,
    /// Linear probe of delivered vs initial encoder on tile phenotypes.
    Probe,
    /// Bootstrap intervals and paired tests over saved predictions.
    Stats,
    /// Speed table from fixtures, optionally with measured throughput.
    Bench,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.global.seed = s;
    }
    if let Some(d) = &cli.run_dir {
        cfg.global.run_dir = d.clone();
    }
    if let Some(l) = &cli.log_level {
        cfg.global.log_level = l.clone();
    }
    cfg.global
        .log_level
        .parse::<log::LevelFilter>()
        .map_err(|_| CliError::Config(format!("global.log_level: unknown level {:?}", cfg.global.log_level)))?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    env_logger::Builder::new()
        .parse_filters(&cfg.global.log_level)
        .format_timestamp(None)
        .try_init()
        .ok();
    let rd = RunDir::create(&cfg.global.run_dir)?;
    let _lock = RunLock::acquire(&rd)?;
    commands::write_resolved_config(&rd, &cfg)?;
    match cli.command {
        Command::Synth => commands::cmd_synth(&rd, &cfg).map(drop),
        Command::Distill => commands::cmd_distill(&rd, &cfg).map(drop),
        Command::Mil => commands::cmd_mil(&rd, &cfg),
        Command::E2e => commands::cmd_e2e(&rd, &cfg),
        Command::Probe => commands::cmd_probe(&rd, &cfg),
        Command::Stats => commands::cmd_stats(&rd, &cfg),
        Command::Bench => commands::cmd_bench(&rd, &cfg).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
