use certismooth::cli::config::{RunConfig, SEED_ENV};
use certismooth::cli::{exit_code, run, Command};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "certismooth", version, about = "Denoised randomized smoothing: certify, attack, adapt")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Key-value config file (`section.key = value` per line).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides such as `--smoothing.sigma=0.5`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Certify every evaluation point and report certified accuracy and ACR.
    Certify(Common),
    /// PGD evaluation: clean and robust accuracy of the smoothed pipeline.
    Attack(Common),
    /// Personalize the denoiser and fine-tune the classifier on a reference set.
    Adapt(Common),
    /// Certification sweep over the timestep correction factor.
    #[command(name = "ablate-k")]
    AblateK(Common),
    /// Train the neural denoiser checkpoint.
    #[command(name = "pretrain-denoiser")]
    PretrainDenoiser(Common),
    /// Recompute aggregates of a report and check them against the stored ones.
    Recompute(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::Certify(c) => (Command::Certify, c),
        Cmd::Attack(c) => (Command::Attack, c),
        Cmd::Adapt(c) => (Command::Adapt, c),
        Cmd::AblateK(c) => (Command::AblateK, c),
        Cmd::PretrainDenoiser(c) => (Command::PretrainDenoiser, c),
        Cmd::Recompute(c) => (Command::Recompute, c),
    };
    let result = RunConfig::load(common.config.as_deref(), &common.overrides, std::env::var(SEED_ENV).ok())
        .and_then(|cfg| run(command, &cfg));
    match result {
        Ok(path) => {
            println!("{}: {}", command.name(), path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
