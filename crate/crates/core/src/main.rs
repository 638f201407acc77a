use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spn::cli::{cmd_ablate, cmd_audit, cmd_eval, cmd_gradcheck, cmd_masks, cmd_train, ExperimentConfig, RawConfig};
use spn::Result;

#[derive(Parser)]
#[command(name = "spn", version, about = "Self pixel-wise normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a GAN and write checkpoints, samples and a metric log.
    Train(Args),
    /// FID and IS of a checkpoint against a dataset.
    Eval(Args),
    /// Finite-difference checks of every SPN operation.
    Gradcheck(Args),
    /// Parameter and FLOP tables for the BN and SPN generators.
    Audit(Args),
    /// Save self-latent mask grids of a checkpoint.
    Masks(Args),
    /// Train every point of the config's sweep grid.
    Ablate(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Configuration file.
    config: PathBuf,
    /// Extra `key=value` assignments applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(cli: Cli) -> Result<()> {
    let load = |a: &Args| ExperimentConfig::load(&a.config, &a.overrides);
    match cli.command {
        Command::Train(a) => cmd_train(&load(&a)?).map(drop),
        Command::Eval(a) => cmd_eval(&load(&a)?).map(drop),
        Command::Gradcheck(a) => cmd_gradcheck(&load(&a)?).map(drop),
        Command::Audit(a) => cmd_audit(&load(&a)?).map(drop),
        Command::Masks(a) => cmd_masks(&load(&a)?).map(drop),
        Command::Ablate(a) => {
            let mut raw = RawConfig::parse_file(&a.config)?;
            raw.apply_overrides(&a.overrides)?;
            let outcomes = cmd_ablate(&raw)?;
            let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
            if failed > 0 {
                return Err(spn::Error::CheckFailed(format!("{failed} of {} variants failed", outcomes.len())));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
