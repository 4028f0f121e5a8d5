//! `chem-emu`: generate datasets, train and evaluate emulators, run the
//! ablation grids, predict trajectories and draw report figures.
//!
//! Exit status is 0 on success, 2 for bad input or configuration and 3
//! when a simulation or training run fails.

mod commands;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use chem_emu_core::kinetics::Split;
use chem_emu_core::train::Grid;
use chem_emu_core::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "chem-emu", version, about = "Neural emulator for chemical-kinetics box models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Components,
    Losses,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the sampling plan and write train/val/test datasets.
    Generate {
        /// Run configuration (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides train.seed and data.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory holding train.cnne and val.cnne.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint. With --config, only train.iters
        /// is taken from the file.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Metrics and per-step error statistics of a checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every row of an ablation grid and rank them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        grid: GridArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict trajectories from initial concentrations and environments.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with one column per input species.
        #[arg(long)]
        x0: PathBuf,
        /// CSV with temperature, humidity and radiation columns.
        #[arg(long)]
        env: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw SVG figures from the CSV files in a run directory.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            commands::generate(&cfg, &out)
        }
        Command::Train {
            config,
            seed,
            data,
            out,
            checkpoint,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let resume = checkpoint
                .as_deref()
                .map(|p| (p, config.is_some().then_some(cfg.schedule.iters)));
            if resume.is_some() && seed.is_some() {
                return Err(Error::Config("--seed cannot change a resumed run".into()));
            }
            commands::train(&cfg, &data, &out, resume)
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            split,
            out,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .filter(|d| !d.as_os_str().is_empty())
                    .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
            });
            commands::eval(&cfg, &checkpoint, &data, split.into(), &out)
        }
        Command::Ablate {
            config,
            seed,
            data,
            grid,
            out,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let grid = match grid {
                GridArg::Components => Grid::Components,
                GridArg::Losses => Grid::Losses,
            };
            commands::ablate(&cfg, &data, grid, &out)
        }
        Command::Predict { checkpoint, x0, env, out } => commands::predict(&checkpoint, &x0, &env, &out),
        Command::Report { run_dir, config } => {
            let cfg = load_config(config.as_deref(), None)?;
            commands::report(&cfg, &run_dir)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
