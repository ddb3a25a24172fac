//! Command-line front end: data ingestion, configs, checkpoints and the
//! experiment runner.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::ENUMERATION_CAP;
use crate::inference::ChainPool;
use crate::model::EnergyModel;
use crate::optim::Algorithm;

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model, CheckpointPaths, RunState};
pub use config::ExperimentConfig;
pub use data::{binarize, load_idx, synthetic_dataset, write_idx, Dataset, IdxMatrix, Split, SyntheticKind};
pub use experiment::{evaluate, run_experiment, EvalRecord, RunOptions, RunSummary};

#[derive(Parser, Debug)]
#[command(name = "mfng", version, about = "Train and evaluate deep Boltzmann machines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Estimate the log-likelihood of a saved model.
    Eval(EvalArgs),
    /// Describe a model, chain-pool, run-state, IDX or config file.
    Inspect { path: PathBuf },
}

#[derive(Args, Debug, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub algorithm: Option<Algorithm>,
}

impl Overrides {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(a) = self.algorithm {
            config.train.algorithm = a;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Replaces `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Supplies the data and evaluation settings.
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let config = args.overrides.load()?;
            let options = RunOptions {
                out_dir: args.out,
                resume: args.resume,
            };
            let summary = run_experiment(&config, &options)?;
            writeln!(
                out,
                "{} epochs, {} updates -> {}",
                summary.epochs_completed,
                summary.updates,
                summary.out_dir.display()
            )?;
            if let Some(e) = summary.last_eval {
                writeln!(out, "{}", serde_json::to_string(&e).map_err(std::io::Error::from)?)?;
            }
        }
        Command::Eval(args) => {
            let config = args.overrides.load()?;
            let model = load_model(&args.checkpoint)?;
            if model.layer_sizes() != config.model.layer_sizes.as_slice() {
                return Err(Error::Config("checkpoint layer sizes differ from the config".into()));
            }
            let (train, test) = experiment::load_datasets(&config)?;
            let ais = config.ais.to_config()?;
            let record = evaluate(&model, &train, test.as_ref(), &config.eval, &ais, config.train.epochs)?;
            writeln!(out, "{}", serde_json::to_string(&record).map_err(std::io::Error::from)?)?;
        }
        Command::Inspect { path } => inspect(&path, out)?,
    }
    Ok(())
}

fn inspect(path: &std::path::Path, out: &mut dyn Write) -> Result<()> {
    let bytes = std::fs::read(path)?;
    match bytes.get(..8) {
        Some(b"MFNGCKPT") => {
            let m = checkpoint::read_model(bytes.as_slice())?;
            writeln!(out, "model {:?}", m.layer_sizes())?;
            writeln!(out, "parameters {}", m.param_vector().len())?;
            writeln!(
                out,
                "units {} (exact evaluation {})",
                m.num_units(),
                if m.num_units() <= ENUMERATION_CAP {
                    "available"
                } else {
                    "unavailable"
                }
            )?;
            for l in 0..m.num_layers() {
                let b = m.bias(l);
                writeln!(out, "b{l} mean {:+.6}", b.iter().sum::<f64>() / b.len() as f64)?;
            }
            for l in 1..m.num_layers() {
                let w = m.weights(l);
                let rms = (w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
                writeln!(out, "W{l} rms {rms:.6}")?;
            }
        }
        Some(b"MFNGPOOL") => {
            let pool = ChainPool::read_snapshot(bytes.as_slice())?;
            let sizes = pool.states()[0].layer_sizes();
            writeln!(out, "chain pool {} chains, layers {:?}", pool.len(), sizes)?;
            for (l, &n) in sizes.iter().enumerate() {
                let on: f64 = pool.states().iter().map(|s| s.layer(l).iter().sum::<f64>()).sum();
                writeln!(out, "layer {l} mean activation {:.4}", on / (n * pool.len()) as f64)?;
            }
        }
        Some(b"MFNGSTAT") => {
            let s = checkpoint::read_run_state(bytes.as_slice())?;
            writeln!(
                out,
                "run state: {} epochs, {} updates, {:.3} s",
                s.step.epoch, s.step.update, s.elapsed_seconds
            )?;
        }
        _ if bytes.starts_with(&[0, 0, 8]) => {
            let m = data::parse_idx(&bytes)?;
            writeln!(
                out,
                "idx {} dims {:?}",
                if m.is_labels() { "labels" } else { "images" },
                m.dims
            )?;
        }
        _ => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|_| Error::InvalidArgument(format!("{}: unrecognised file", path.display())))?;
            let c = ExperimentConfig::from_toml_str(text)?;
            write!(out, "{}", c.to_toml_string()?)?;
        }
    }
    Ok(())
}
