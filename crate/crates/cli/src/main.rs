mod commands;
mod error;
mod manifest;
mod selftest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use fltrace::attacks::AttackSpec;
use fltrace::fedsim::Strategy;
use fltrace::pipeline::RunLayout;

use crate::commands::{AttackArgs, ReportArgs, SetupArgs, TraceArgs, TraceMode, TrainArgs};
use crate::error::{CliError, CliResult, ExitCode};
use crate::manifest::RunManifest;

/// Traitor tracing for federated-learning classifiers: code generation,
/// fingerprinted training, collusion attacks and accusation.
#[derive(Parser)]
#[command(name = "fltrace", version)]
struct Cli {
    /// Run directory holding artifacts, checkpoints and reports.
    #[arg(long, global = true, env = "FLTRACE_OUT", default_value = "runs/default")]
    run_dir: PathBuf,

    /// Worker threads for trials and per-copy steps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a config and generate codes, triggers, bases, projection and the data partition.
    Setup {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one strategy and write a checkpoint per owner copy.
    Train {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        /// Owner(s) to train for the independent strategies.
        #[arg(long = "owner", default_value = "0")]
        owners: Vec<usize>,
    },
    /// Merge colluder copies, optionally fine-tune or prune, and write the suspect model.
    Attack {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        /// Comma-separated colluder ids.
        #[arg(long, value_delimiter = ',', required_unless_present = "spec")]
        colluders: Vec<usize>,
        /// none, finetune or prune (parameters from the run config).
        #[arg(long, default_value = "none")]
        post: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON attack spec (colluders, post_attack, seed) instead of the flags.
        #[arg(long, conflicts_with = "colluders")]
        spec: Option<PathBuf>,
        /// Output name under attacks/ (derived from the spec by default).
        #[arg(long)]
        name: Option<String>,
    },
    /// Run black-box and/or white-box accusation on a suspect checkpoint.
    Trace {
        #[arg(long)]
        suspect: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        mode: TraceMode,
    },
    /// Run the configured collusion trials on trained copies and summarize them.
    Report {
        #[arg(long = "strategy", value_parser = parse_strategy)]
        strategies: Vec<Strategy>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Validation("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    let layout = RunLayout::new(cli.run_dir);
    match cli.command {
        Command::Setup { config } => commands::setup(&layout, &SetupArgs { config }),
        Command::Train { strategy, owners } => commands::train(&layout, &TrainArgs { strategy, owners }),
        Command::Attack {
            strategy,
            colluders,
            post,
            seed,
            spec,
            name,
        } => {
            let spec = match spec {
                Some(path) => commands::read_attack_spec(&path)?,
                None => {
                    let config = RunManifest::load(&layout)?.config;
                    AttackSpec {
                        colluders,
                        post_attack: commands::parse_post_attack(&config, &post)?,
                        seed,
                    }
                }
            };
            commands::attack(&layout, &AttackArgs { strategy, spec, name }).map(|_| ())
        }
        Command::Trace { suspect, mode } => commands::trace(&layout, &TraceArgs { suspect, mode }).map(|_| ()),
        Command::Report { strategies } => commands::report(&layout, &ReportArgs { strategies }),
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            match checks.iter().filter(|c| !c.passed).count() {
                0 => Ok(()),
                failed => Err(CliError::Selftest { failed }),
            }
        }
    }
}

fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::from(ExitCode::Ok as u8),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(e.exit_code() as u8)
        }
    }
}
