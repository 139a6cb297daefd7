//! Command-line entry point for the experiment pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lrelab::config::RunConfig;
use lrelab::pipeline;

/// Relational approximators of a toy transformer, from corpus to report.
#[derive(Debug, Parser)]
#[command(name = "lrelab", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "lrelab.toml")]
    config: PathBuf,

    /// Override a configuration value, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the corpus, vocabulary and relation files.
    GenCorpus,
    /// Train the model and write the checkpoint and loss curve.
    Train,
    /// Estimate operators for every relation and configured layer.
    Estimate,
    /// Layer sweep over all relations; writes the results table.
    Sweep,
    /// Beta sweeps, projections and bias cosines.
    Project,
    /// Summary tables folded from the results already on disk.
    Report,
    /// Every stage in order.
    All,
}

fn run(cli: &Cli) -> lrelab::Result<()> {
    let cfg = RunConfig::load(&cli.config, &cli.overrides)?;
    let stages: &[fn(&RunConfig) -> lrelab::Result<pipeline::Written>] = match cli.command {
        Command::GenCorpus => &[pipeline::gen_corpus],
        Command::Train => &[pipeline::train_model],
        Command::Estimate => &[pipeline::estimate_operators],
        Command::Sweep => &[pipeline::run_sweep],
        Command::Project => &[pipeline::run_projection],
        Command::Report => &[pipeline::report],
        Command::All => &[
            pipeline::gen_corpus,
            pipeline::train_model,
            pipeline::estimate_operators,
            pipeline::run_sweep,
            pipeline::run_projection,
            pipeline::report,
        ],
    };
    for stage in stages {
        for path in stage(&cfg)?.0 {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("LRELAB_WORKERS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: worker pool: {e}");
                    return ExitCode::FAILURE;
                }
            }
            _ => {
                eprintln!("error: LRELAB_WORKERS must be a positive integer, got {v:?}");
                return ExitCode::FAILURE;
            }
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
