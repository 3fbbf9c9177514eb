use std::path::PathBuf;
use std::process::ExitCode;

use adaface_cli::{execute, CliError, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adaface", version, about = "Quality-adaptive margin loss experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Configuration file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must be empty unless --overwrite is given.
    #[arg(long)]
    out: PathBuf,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic benchmark and evaluate.
    Train(Common),
    /// Sweep one parameter (`ablate.axis`, `ablate.values`).
    Ablate(Common),
    /// Export gradient-scaling-term tables.
    GstField(Common),
    /// Run the analytic gradient oracle suite.
    Gradcheck(Common),
    /// Evaluate a checkpoint (`eval.checkpoint`).
    Evaluate(Common),
    /// Compare per-iteration cost across variants.
    Timing(Common),
}

fn build_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.merge_text(&std::fs::read_to_string(path)?)?;
    }
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Train(c) => ("train", c),
        Command::Ablate(c) => ("ablate", c),
        Command::GstField(c) => ("gst-field", c),
        Command::Gradcheck(c) => ("gradcheck", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Timing(c) => ("timing", c),
    };
    let result = build_config(common)
        .map_err(|e| match e {
            CliError::Core(adaface_core::Error::Io(io)) => {
                CliError::Core(adaface_core::Error::Config(format!("cannot read config: {io}")))
            }
            other => other,
        })
        .and_then(|cfg| execute(name, cfg, &common.out, common.overwrite));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
