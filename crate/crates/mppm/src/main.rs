use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mppm::config::Settings;
use mppm::jobs::{self, Command};
use mppm::Error;

#[derive(Parser)]
#[command(name = "mppm", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("MPPM_GIT_DESCRIBE"), ")"))]
#[command(about = "Train and apply manifold probabilistic projection models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; created if missing.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Trained model for reconstruct, generate and evaluate.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// `key=value`, applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Train a model and write its checkpoint and epoch log.
    Train,
    /// Restore the degraded test split with the projection loop and the DAE baseline.
    Reconstruct,
    /// Generate images from pure noise.
    Generate,
    /// Tabulate mean SSIM/MSE per method, degradation and severity.
    Evaluate,
    /// Finite-difference check of both losses on tiny models.
    Gradcheck,
}

fn execute(cli: Cli) -> Result<(), Error> {
    let mut overrides = cli.common.overrides;
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("seed = {seed}"));
    }
    let settings = Settings::load(cli.common.config.as_deref(), &overrides)?;
    let command = match cli.command {
        Cmd::Train => Command::Train,
        Cmd::Reconstruct => Command::Reconstruct,
        Cmd::Generate => Command::Generate,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Gradcheck => Command::GradCheck,
    };
    jobs::run(command, &settings, &cli.common.out, cli.common.checkpoint.as_deref())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mppm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
