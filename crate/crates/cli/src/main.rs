//! `rssm` command-line entry points.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid config, 3 training
//! diverged (the partial trace is saved), 4 checkpoint does not match.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RawConfig};

#[derive(Parser)]
#[command(
    name = "rssm",
    version,
    about = "Generate data, train and evaluate recurrent state-space models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.csv and test.csv for a pendulum environment.
    Generate(Common),
    /// Train a model; writes model.ckpt, best.ckpt, last.ckpt and trace.csv.
    Train(Common),
    /// Roll out checkpoints on a dataset; writes metrics.csv and summary.csv.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the command's section.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory of the command's section.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config, defaults included, and exit.
    #[arg(long)]
    print_config: bool,
}

fn run(cli: Cli) -> Result<()> {
    let (section, args) = match &cli.command {
        Command::Generate(a) => ("generate", a),
        Command::Train(a) => ("train", a),
        Command::Eval(a) => ("eval", a),
    };
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut raw = RawConfig::parse(&text)?;
    if let Some(seed) = args.seed {
        raw.set(section, "seed", seed.to_string());
    }
    if let Some(out) = &args.out {
        raw.set(section, "out", out.to_string_lossy());
    }
    if args.print_config {
        let mut sections = Vec::new();
        if section == "train" || (section == "eval" && raw.has_section("model")) {
            sections.push(raw.resolve("model")?);
        }
        sections.push(raw.resolve(section)?);
        let mut out = String::new();
        for s in &sections {
            s.render(&mut out);
        }
        print!("{out}");
        return Ok(());
    }
    match cli.command {
        Command::Generate(_) => commands::generate(&raw),
        Command::Train(_) => commands::train_cmd(&raw),
        Command::Eval(_) => commands::eval_cmd(&raw),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<rssm::Error>() {
            return match e {
                rssm::Error::Config(_) => 2,
                rssm::Error::Diverged { .. } => 3,
                rssm::Error::CheckpointMismatch(_) => 4,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
