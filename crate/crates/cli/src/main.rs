use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ionstain_cli::commands;
use ionstain_cli::config::RunConfig;
use ionstain_cli::error::{CliError, CliResult};
use ionstain_cli::studies;

#[derive(Parser)]
#[command(name = "ionstain", version, about = "Virtual staining of ion images with a Brownian-bridge diffusion model")]
struct Cli {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; required by every randomized command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Synth,
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Sample every test FOV with a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score predicted stains against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// A dataset directory (test split) or a directory of PPM images.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Train and compare models on SNR-ranked channel subsets.
    AblateChannels {
        #[arg(long)]
        data: PathBuf,
    },
    /// Sweep the exit point of the mean and skip strategies.
    SweepExit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Pixel-wise coefficient of variation over repeated sampling.
    Cv {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Radial power spectra of an ion channel, the virtual stain and the ground truth.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Export the posterior variance along the sampling plan.
    Schedule,
}

impl Command {
    fn randomized(&self) -> bool {
        !matches!(self, Command::Eval { .. } | Command::Schedule)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.command.randomized() {
        let seed = cli
            .seed
            .ok_or_else(|| CliError::usage("this command is randomized and needs --seed"))?;
        match &cli.command {
            Command::Synth => cfg.data.phantom.seed = seed,
            Command::Train { .. } => cfg.training.seed = seed,
            Command::AblateChannels { .. } => {
                cfg.training.seed = seed;
                cfg.sampling.seed = seed;
            }
            _ => cfg.sampling.seed = seed,
        }
    }
    let out = cli.out.ok_or_else(|| CliError::usage("--out is required"))?;
    match cli.command {
        Command::Synth => commands::synth(&cfg, &out)?,
        Command::Train { data } => {
            commands::train(&cfg, &data, &out)?;
        }
        Command::Sample { checkpoint, data } => commands::sample(&cfg, &checkpoint, &data, &out)?,
        Command::Eval { pred, gt } => {
            commands::eval(&cfg, &pred, &gt, &out)?;
        }
        Command::AblateChannels { data } => {
            studies::ablate_channels(&cfg, &data, &out)?;
        }
        Command::SweepExit { checkpoint, data } => {
            studies::sweep_exit(&cfg, &checkpoint, &data, &out)?;
        }
        Command::Cv { checkpoint, data } => {
            studies::cv(&cfg, &checkpoint, &data, &out)?;
        }
        Command::Spectrum { checkpoint, data } => {
            studies::spectrum(&cfg, &checkpoint, &data, &out)?;
        }
        Command::Schedule => commands::schedule(&cfg, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::usage(first.trim_start_matches("error: ")).line());
            return ExitCode::from(ionstain_cli::error::EXIT_USAGE as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code as u8)
        }
    }
}
