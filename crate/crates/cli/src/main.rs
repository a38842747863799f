//! `gdc`: constrain, tune, sample and verify small autoregressive models from a
//! JSON experiment config.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use pipeline::{LogMode, Run, VerificationFailed};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "gdc", version, about = "Generation under distributional control on toy autoregressive models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the target's coefficients and write the target JSON and fit report.
    FitLambda(Common),
    /// Constrain, then fine-tune a copy of the base toward the target.
    Tune(Common),
    /// Quasi-rejection sampling from a saved target with a saved proposal.
    Qrs {
        #[command(flatten)]
        common: Common,
        /// Target JSON (default: <out>/target.json).
        #[arg(long)]
        target: Option<PathBuf>,
        /// Proposal model JSON (default: the tuned model in <out>, else the base).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Exact quantities by enumeration, printed as JSON.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Target JSON (default: rebuilt from the config).
        #[arg(long)]
        target: Option<PathBuf>,
        /// Model JSON to compare against the target.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Full pipeline: fit, tune, optional QRS sweep, optional verification.
    Experiment(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the seed of every stochastic stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Check results against the enumeration oracle; exit nonzero on failure.
    #[arg(long)]
    verify: bool,
    /// Output directory (default: the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LogMode::Both)]
    log: LogMode,
}

impl Common {
    fn run(&self) -> Result<Run> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.reseed(seed);
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok(Run {
            cfg,
            out,
            log: self.log,
            verify: self.verify,
        })
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitLambda(c) => c.run()?.fit_lambda(),
        Command::Tune(c) => c.run()?.tune(),
        Command::Experiment(c) => c.run()?.experiment(),
        Command::Qrs { common, target, model } => common.run()?.qrs(target.as_deref(), model.as_deref()),
        Command::Oracle { common, target, model } => {
            let report = common.run()?.oracle(target.as_deref(), model.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return EXIT_FAILURE;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<gdc::Error>() {
            use gdc::Error::*;
            return match e {
                InvalidVocab(_) | InvalidSequence(_) | OutOfVocab { .. } | UnknownContext(_) | InvalidConfig(_)
                | UnknownFeature(_) | FeatureValue { .. } | SpaceTooLarge { .. } | Unsupported(_) | FrozenModel => {
                    EXIT_CONFIG
                }
                Infeasible(_) | NotConverged { .. } => EXIT_INFEASIBLE,
                NumericalAbort { .. } => EXIT_NUMERICAL,
                _ => EXIT_FAILURE,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
