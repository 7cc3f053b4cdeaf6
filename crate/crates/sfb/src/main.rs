use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfb::commands;
use sfb::error::HarnessError;

#[derive(Parser)]
#[command(name = "sfb", about = "Stable feature boosting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the datasets of every seed.
    Generate(Args),
    /// Train, select penalties and calibrate; save models and training logs.
    Train(Args),
    /// Adapt saved models to the unlabeled test split.
    Adapt(Args),
    /// Score saved adapted checkpoints on the test split.
    Evaluate(Args),
    /// Whole pipeline for every seed, then the report.
    Run(Args),
    /// Evaluate on a grid of test domains.
    Sweep(Args),
    /// Re-render report.txt and summary.csv from results.csv.
    Report(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let (Command::Generate(a)
    | Command::Train(a)
    | Command::Adapt(a)
    | Command::Evaluate(a)
    | Command::Run(a)
    | Command::Sweep(a)
    | Command::Report(a)) = &cli.command;
    let cfg = commands::load_config(&a.config, a.seed, a.out.clone())?;
    match cli.command {
        Command::Generate(_) => {
            for p in commands::cmd_generate(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Train(_) => {
            for s in commands::cmd_train(&cfg)? {
                println!(
                    "seed {}: lambda_s={} lambda_c={} temperature={} adaptation_steps={}",
                    s.seed, s.selected.lambda_s, s.selected.lambda_c, s.selected.temperature, s.adaptation_steps
                );
            }
        }
        Command::Adapt(_) => {
            for p in commands::cmd_adapt(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate(_) => {
            for e in commands::cmd_evaluate(&cfg)? {
                println!("seed {}: stable {:.2}% adapted {:.2}%", e.seed, e.stable_accuracy, e.adapted_accuracy);
            }
        }
        Command::Run(_) | Command::Report(_) => {
            let text = if matches!(cli.command, Command::Run(_)) {
                commands::cmd_run(&cfg)?
            } else {
                commands::cmd_report(&cfg)?
            };
            print!("{text}");
        }
        Command::Sweep(_) => {
            let m = commands::cmd_sweep(&cfg)?;
            print!("{}", commands::render_sweep_csv(&m)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
