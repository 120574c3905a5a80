use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use forgetkit_cli::commands::{self, Overrides};
use forgetkit_cli::{exit_code, UserError};

#[derive(Parser, Debug)]
#[command(
    name = "forgetkit",
    version,
    about = "Continual class forgetting with group-sparse LoRA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Checkpoint directory, or a directory of `seed-*` checkpoints.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Run only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Pretraining epochs, or recovery epochs for `recover`.
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base classifier for each seed.
    Pretrain,
    /// Run the forgetting scenario and write metrics.
    Forget,
    /// Fine-tune the head of a forgotten model and of the masked comparator.
    Recover,
    /// Merge metrics.csv files from run directories into one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let ov = Overrides {
        seed: cli.seed,
        epochs: cli.epochs,
        out: cli.out.clone(),
    };
    let need_config = || {
        cli.config
            .clone()
            .ok_or_else(|| UserError("--config is required".into()))
    };
    match &cli.command {
        Command::Pretrain => {
            for dir in commands::pretrain(&need_config()?, &ov)? {
                println!("{}", dir.display());
            }
        }
        Command::Forget => {
            for dir in commands::forget(&need_config()?, cli.checkpoint.as_deref(), &ov)? {
                println!("{}", dir.join("metrics.csv").display());
            }
        }
        Command::Recover => {
            let Some(ckpt) = &cli.checkpoint else {
                bail!(UserError("--checkpoint is required".into()));
            };
            let out = commands::recover(ckpt, cli.config.as_deref(), &ov)?;
            println!("{}", out.display());
        }
        Command::Report { runs } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("report"));
            let report = commands::report(runs, &out)?;
            print!("{}", commands::render_text(&report.summary));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FF_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
