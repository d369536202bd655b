//! Command-line front end for `latticeglm`.

pub mod commands;
pub mod config;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use latticeglm::Error;

use crate::config::{Config, Experiment};

#[derive(Debug, Parser)]
#[command(name = "latticeglm", version, about = "Lattice-partitioned piecewise GLMs")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build lattice dimensions from data under the bin-count bound.
    Bin {
        #[arg(short, long)]
        config: PathBuf,
        /// Accept bin counts above the bound.
        #[arg(long)]
        force: bool,
        /// Lattice output file (overrides bin.output).
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit a model and write an artifact.
    Fit {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Truncation order (overrides model.order).
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// WAIC and held-out loss of a saved model.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Choose the truncation order from WAIC gaps.
    SelectOrder {
        #[arg(short, long)]
        config: PathBuf,
        /// Writes the selected model.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_order: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit local stacking weights over base-model logits.
    Stack {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a synthetic experiment.
    Simulate {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        experiment: Option<Experiment>,
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score a CSV with a saved model or stacking artifact.
    Predict {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

/// Exit status for each error class; usage errors use 2 as clap does.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::IngestError { .. } | Error::EmptyData | Error::Io(_) => 3,
        Error::DegenerateBinning { .. }
        | Error::UnknownLevel { .. }
        | Error::MissingLatticeFeature { .. }
        | Error::InfeasibleLattice(_)
        | Error::InvalidTruncation { .. }
        | Error::ModelLatticeMismatch(_)
        | Error::InvalidRefinement(_)
        | Error::DimensionError { .. } => 4,
        Error::InvalidResponse { .. }
        | Error::NumericalError(_)
        | Error::NonConvergence { .. }
        | Error::Diverged { .. }
        | Error::InsufficientConcentration(_)
        | Error::IllDefinedFlow { .. }
        | Error::UndefinedRho => 5,
        Error::UnsupportedVersion { .. } | Error::ChecksumError(_) => 6,
    }
}

fn emit(report: &report::Report, csv: Option<&Path>) -> Result<String, Error> {
    if let Some(path) = csv {
        report.write_csv(path)?;
    }
    Ok(report.render())
}

/// Runs one command and returns what goes to stdout.
pub fn run(cli: Cli) -> Result<String, Error> {
    match cli.command {
        Command::Bin {
            config,
            force,
            out,
            csv,
        } => {
            let mut cfg = Config::load(&config)?;
            if out.is_some() {
                cfg.bin.output = out;
            }
            emit(&commands::bin(&cfg, force)?, csv.as_deref())
        }
        Command::Fit {
            config,
            out,
            order,
            seed,
            csv,
        } => {
            let mut cfg = Config::load(&config)?;
            if let Some(k) = order {
                cfg.model.order = k;
            }
            if let Some(s) = seed {
                cfg.fit.seed = s;
            }
            emit(&commands::fit(&cfg, out.as_deref())?, csv.as_deref())
        }
        Command::Eval {
            config,
            model,
            seed,
            csv,
        } => {
            let mut cfg = Config::load(&config)?;
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            emit(&commands::eval(&cfg, &model)?, csv.as_deref())
        }
        Command::SelectOrder {
            config,
            out,
            max_order,
            csv,
        } => {
            let mut cfg = Config::load(&config)?;
            if let Some(k) = max_order {
                cfg.select.max_order = k;
            }
            emit(&commands::select_order(&cfg, out.as_deref())?, csv.as_deref())
        }
        Command::Stack { config, out, csv } => {
            let cfg = Config::load(&config)?;
            emit(&commands::stack(&cfg, out.as_deref())?, csv.as_deref())
        }
        Command::Simulate {
            config,
            experiment,
            replications,
            seed,
            csv,
        } => {
            let mut cfg = match config {
                Some(path) => Config::load(&path)?,
                None => Config::default(),
            };
            if let Some(e) = experiment {
                cfg.simulate.experiment = e;
            }
            if let Some(r) = replications {
                cfg.simulate.replications = r;
            }
            if let Some(s) = seed {
                cfg.simulate.seed = s;
            }
            emit(&commands::simulate(&cfg)?, csv.as_deref())
        }
        Command::Predict { model, data, out } => {
            let text = commands::predict(&model, &data)?;
            match out {
                Some(path) => {
                    fs::write(&path, text)?;
                    Ok(format!("predictions written to {}\n", path.display()))
                }
                None => Ok(text),
            }
        }
    }
}
