//! `btn`: data generation, certified training, certification and attack
//! reports for the micro multi-column density model.

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "btn", version, about = "Certified training and verification of density-map CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/val/test splits.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the scheduled natural/certify loss.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding `train/` and `val/` splits.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        until_epoch: Option<usize>,
    },
    /// Certified clean / tight / pixel metrics for one or more radii.
    Certify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated radii; fractions such as `1/255` are accepted.
        #[arg(long, value_delimiter = ',', value_parser = config::parse_epsilon)]
        eps: Option<Vec<f64>>,
        #[arg(long, default_value = "linf")]
        norm: btn::bounds::NormKind,
        #[arg(long)]
        out: PathBuf,
        /// Supplies `eval` defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Search each perturbation set for outputs outside the certified bounds.
    Attack {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = config::parse_epsilon)]
        eps: f64,
        #[arg(long, default_value = "linf")]
        norm: btn::bounds::NormKind,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Lowers every certified upper bound by this amount before the
        /// search; exercises the violation exit path.
        #[arg(long, hide = true)]
        shrink_upper: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData { config, out } => commands::generate_data(&config, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
            until_epoch,
        } => commands::train(&config, &data, &out, resume.as_deref(), until_epoch),
        Command::Certify {
            ckpt,
            data,
            eps,
            norm,
            out,
            config,
        } => commands::certify(&ckpt, &data, eps, norm, &out, config.as_deref()),
        Command::Attack {
            ckpt,
            data,
            eps,
            norm,
            samples,
            seed,
            out,
            config,
            shrink_upper,
        } => commands::attack(commands::AttackArgs {
            ckpt: &ckpt,
            data: &data,
            eps,
            norm,
            samples,
            seed,
            out: &out,
            config: config.as_deref(),
            shrink_upper,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
