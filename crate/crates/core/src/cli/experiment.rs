//! Runs a configured experiment and writes its artifacts.
//!
//! Output directory layout:
//!
//! ```text
//! config.toml        resolved configuration
//! metrics.csv        epoch,cpu_seconds,updates,train_loglik,test_loglik,solver_iters_mean,grad_norm_mean
//! timing.csv         epoch,t_pos_phase,t_neg_phase,t_build_S,t_solve,t_apply,t_total
//! updates.jsonl      one record per update and per evaluation
//! checkpoints/       epoch_NNNNN.{model,pool,state}
//! ```
//!
//! `metrics.csv` has a row per epoch (epoch 0 is the initial model); the
//! likelihood columns are empty on epochs without an evaluation. Timing
//! columns are per-update means in seconds.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cli::checkpoint::{
    latest_checkpoint, load_checkpoint, save_checkpoint, save_model, CheckpointPaths, RunState,
};
use crate::cli::config::{DataSpec, EvalMethod, EvalSettings, ExperimentConfig, OffsetPolicy};
use crate::cli::data::{binarize, load_idx, synthetic_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{
    ais_log_z, dbm_loglik_given_log_z, even_hidden_units, exact_log_z, mean_field_loglik_bound, AisConfig, BaseRate,
    ENUMERATION_CAP,
};
use crate::model::{DbmModel, EnergyModel};
use crate::optim::{initial_model, Clock, TrainObserver, Trainer, UpdateReport};

pub const METRICS_HEADER: &str = "epoch,cpu_seconds,updates,train_loglik,test_loglik,solver_iters_mean,grad_norm_mean";
pub const TIMING_HEADER: &str = "epoch,t_pos_phase,t_neg_phase,t_build_S,t_solve,t_apply,t_total";

/// Training and (optional) test data for a config.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let nv = config.model.layer_sizes[0];
    let (train, test) = match &config.data {
        DataSpec::Idx {
            train_images,
            test_images,
            train_subset,
            test_subset,
            threshold,
        } => {
            let read = |path: &Path, subset: Option<usize>, split| -> Result<Dataset> {
                let m = load_idx(path)?;
                if m.is_labels() {
                    return Err(Error::Config(format!("{} holds labels, not images", path.display())));
                }
                if m.num_cols() != nv {
                    return Err(Error::Config(format!(
                        "{} has {} pixels per image but the model has {nv} visible units",
                        path.display(),
                        m.num_cols()
                    )));
                }
                let d = Dataset::new(binarize(&m.rows, *threshold), nv, split)?;
                Ok(match subset {
                    Some(n) => d.take(n),
                    None => d,
                })
            };
            let train = read(train_images, *train_subset, Split::Train)?;
            let test = test_images
                .as_deref()
                .map(|p| read(p, *test_subset, Split::Test))
                .transpose()?;
            (train, test)
        }
        spec => {
            let (kind, train_size, test_size, seed) = spec.synthetic().expect("synthetic spec");
            let train = synthetic_dataset(kind, train_size, seed, 0, Split::Train)?;
            let test = (test_size > 0)
                .then(|| synthetic_dataset(kind, test_size, seed, 1, Split::Test))
                .transpose()?;
            (train, test)
        }
    };
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    Ok((train, test))
}

/// Initial model for a config and its training data.
pub fn build_model(config: &ExperimentConfig, train: &Dataset) -> Result<DbmModel> {
    let mut model = initial_model(
        &config.model.layer_sizes,
        &train.rows,
        config.model.init,
        config.train.seed,
    )?;
    if config.model.offsets == OffsetPolicy::Zero {
        let mut zero = DbmModel::new(&config.model.layer_sizes)?;
        zero.set_params(model.param_vector().values())?;
        model = zero;
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AisSummary {
    pub log_weight_variance: f64,
    pub n_particles: usize,
    pub n_betas: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoglikMethod {
    /// Exact `log Z` and exact marginals.
    Exact,
    /// AIS `log Z` with exactly marginalised hidden units (odd layers in
    /// closed form, even hidden layers enumerated).
    Ais,
    /// AIS `log Z` with the mean-field lower bound on `log p*(v)`.
    AisMeanField,
}

/// One evaluation of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub method: LoglikMethod,
    pub log_z: f64,
    pub train_loglik: f64,
    pub test_loglik: Option<f64>,
    pub ais: Option<AisSummary>,
}

/// Evaluates `model` on the training (and test) data.
///
/// `Auto` enumerates when the model has at most [`ENUMERATION_CAP`] units
/// and falls back to AIS otherwise. Per-row marginals are exact while the
/// even hidden layers fit under the cap, and a mean-field bound beyond that.
pub fn evaluate(
    model: &DbmModel,
    train: &Dataset,
    test: Option<&Dataset>,
    settings: &EvalSettings,
    ais: &AisConfig,
    epoch: usize,
) -> Result<EvalRecord> {
    let units = model.num_units();
    let exact = match settings.method {
        EvalMethod::Exact => true,
        EvalMethod::Ais => false,
        EvalMethod::Auto => units <= ENUMERATION_CAP,
    };
    let (log_z, ais_summary) = if exact {
        (exact_log_z(model)?, None)
    } else {
        let base = BaseRate::from_data(&train.rows, model.num_visible())?;
        let est = ais_log_z(model, &base, ais)?;
        let summary = AisSummary {
            log_weight_variance: est.log_weight_variance,
            n_particles: est.n_particles,
            n_betas: est.n_betas,
        };
        (est.log_z, Some(summary))
    };
    let method = if exact {
        LoglikMethod::Exact
    } else if even_hidden_units(model) <= ENUMERATION_CAP {
        LoglikMethod::Ais
    } else {
        LoglikMethod::AisMeanField
    };
    let loglik = |d: &Dataset| match method {
        LoglikMethod::AisMeanField => mean_field_loglik_bound(model, &d.rows, settings.mean_field_iterations, log_z),
        _ => dbm_loglik_given_log_z(model, &d.rows, log_z),
    };
    Ok(EvalRecord {
        epoch,
        method,
        log_z,
        train_loglik: loglik(train)?,
        test_loglik: test.filter(|t| !t.is_empty()).map(loglik).transpose()?,
        ais: ais_summary,
    })
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogRecord<'a> {
    Update(&'a UpdateReport),
    Eval(&'a EvalRecord),
}

/// Exclusive claim on an output directory, released on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(format!(
                "output directory {} is in use (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

fn fmt_seconds(nanos: u64) -> String {
    format!("{}.{:09}", nanos / 1_000_000_000, nanos % 1_000_000_000)
}

/// Keeps the header and the rows whose first field is an epoch `<= epoch`.
fn truncate_csv(path: &Path, epoch: usize) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= epoch);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn truncate_jsonl(path: &Path, epoch: usize) -> Result<()> {
    let mut out = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            offset: 0,
            message: format!("bad log line: {e}"),
        })?;
        if value["epoch"].as_u64().is_some_and(|e| e as usize <= epoch) {
            out.push_str(&line);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Outputs {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    log: BufWriter<File>,
}

impl Outputs {
    fn open(dir: &Path, fresh: bool) -> Result<Self> {
        let open = |name: &str, header: Option<&str>| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let mut w = if fresh {
                BufWriter::new(File::create(path)?)
            } else {
                BufWriter::new(OpenOptions::new().append(true).open(path)?)
            };
            if fresh {
                if let Some(h) = header {
                    writeln!(w, "{h}")?;
                }
            }
            Ok(w)
        };
        Ok(Self {
            metrics: open("metrics.csv", Some(METRICS_HEADER))?,
            timing: open("timing.csv", Some(TIMING_HEADER))?,
            log: open("updates.jsonl", None)?,
        })
    }

    fn log(&mut self, record: LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.log, &record).map_err(std::io::Error::from)?;
        writeln!(self.log)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        self.log.flush()?;
        Ok(())
    }
}

/// Where to write, and whether to continue from the newest checkpoint.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides `output.dir` from the config.
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub epochs_completed: usize,
    pub updates: u64,
    pub last_eval: Option<EvalRecord>,
}

struct Recorder<'a> {
    out: Outputs,
    config: &'a ExperimentConfig,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    ais: AisConfig,
    checkpoint_dir: PathBuf,
    elapsed: f64,
    epoch_start: Instant,
    reports: Vec<UpdateReport>,
    last_eval: Option<EvalRecord>,
}

impl Recorder<'_> {
    fn write_metrics(&mut self, epoch: usize, updates: u64, eval: Option<&EvalRecord>) -> Result<()> {
        let n = self.reports.len() as f64;
        let solver: Vec<f64> = self
            .reports
            .iter()
            .filter_map(|r| r.solver.as_ref().map(|s| s.iterations as f64))
            .collect();
        let solver_mean = (!solver.is_empty()).then(|| solver.iter().sum::<f64>() / solver.len() as f64);
        let grad_mean = (n > 0.0).then(|| self.reports.iter().map(|r| r.gradient_norm).sum::<f64>() / n);
        writeln!(
            self.out.metrics,
            "{epoch},{:.6},{updates},{},{},{},{}",
            self.elapsed,
            fmt_opt(eval.map(|e| e.train_loglik)),
            fmt_opt(eval.and_then(|e| e.test_loglik)),
            fmt_opt(solver_mean),
            fmt_opt(grad_mean),
        )?;
        Ok(())
    }

    fn write_timing(&mut self, epoch: usize) -> Result<()> {
        if self.reports.is_empty() {
            return Ok(());
        }
        let n = self.reports.len() as u64;
        let mean = |f: fn(&UpdateReport) -> u64| self.reports.iter().map(f).sum::<u64>() / n;
        let total: u64 = self.reports.iter().map(|r| r.timings.total).sum::<u64>().div_ceil(n);
        let row = format!(
            "{epoch},{},{},{},{},{},{}",
            fmt_seconds(mean(|r| r.timings.pos_phase)),
            fmt_seconds(mean(|r| r.timings.neg_phase)),
            fmt_seconds(mean(|r| r.timings.build_s)),
            fmt_seconds(mean(|r| r.timings.solve)),
            fmt_seconds(mean(|r| r.timings.apply)),
            fmt_seconds(total),
        );
        writeln!(self.out.timing, "{row}")?;
        Ok(())
    }

    fn evaluate(&mut self, model: &DbmModel, epoch: usize) -> Result<EvalRecord> {
        let record = evaluate(model, self.train, self.test, &self.config.eval, &self.ais, epoch)?;
        self.out.log(LogRecord::Eval(&record))?;
        self.last_eval = Some(record.clone());
        Ok(record)
    }
}

impl TrainObserver for Recorder<'_> {
    fn on_update(&mut self, report: &UpdateReport) -> Result<()> {
        self.out.log(LogRecord::Update(report))?;
        self.reports.push(report.clone());
        Ok(())
    }

    fn on_epoch(&mut self, trainer: &Trainer) -> Result<()> {
        if self.config.train.clock == Clock::Wall {
            self.elapsed += self.epoch_start.elapsed().as_secs_f64();
        }
        let epoch = trainer.state.epoch;
        let last = epoch == trainer.config.epochs;
        let eval = if epoch.is_multiple_of(self.config.eval.every) || last {
            Some(self.evaluate(&trainer.model, epoch)?)
        } else {
            None
        };
        self.write_metrics(epoch, trainer.state.update, eval.as_ref())?;
        self.write_timing(epoch)?;
        self.reports.clear();
        let every = self.config.output.checkpoint_every;
        if last || (every > 0 && epoch.is_multiple_of(every)) {
            let state = RunState {
                step: trainer.state.clone(),
                elapsed_seconds: self.elapsed,
            };
            save_checkpoint(&self.checkpoint_dir, &trainer.model, &trainer.pool, &state)?;
        }
        self.out.flush()?;
        self.epoch_start = Instant::now();
        Ok(())
    }
}

/// Trains and evaluates per `config`, writing every artifact to the output
/// directory. With `resume`, continues from the newest checkpoint there.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let out_dir = options
        .out_dir
        .clone()
        .or_else(|| config.output.dir.clone())
        .ok_or_else(|| Error::Config("no output directory given (set output.dir or pass --out)".into()))?;
    std::fs::create_dir_all(&out_dir)?;
    let _lock = Lock::acquire(&out_dir)?;
    let checkpoint_dir = out_dir.join("checkpoints");

    let (train, test) = load_datasets(config)?;
    let ais = config.ais.to_config()?;

    if !options.resume && out_dir.join("metrics.csv").exists() {
        return Err(Error::Config(format!(
            "{} already holds a run (pass --resume to continue it, or choose another directory)",
            out_dir.display()
        )));
    }
    let resume_from = if options.resume {
        latest_checkpoint(&checkpoint_dir)?
    } else {
        None
    };
    let (trainer, elapsed, fresh) = match resume_from {
        Some(epoch) => {
            let (model, pool, state) = load_checkpoint(&CheckpointPaths::new(&checkpoint_dir, epoch))?;
            if model.layer_sizes() != config.model.layer_sizes.as_slice() {
                return Err(Error::Config("checkpoint layer sizes differ from the config".into()));
            }
            for name in ["metrics.csv", "timing.csv"] {
                truncate_csv(&out_dir.join(name), epoch)?;
            }
            truncate_jsonl(&out_dir.join("updates.jsonl"), epoch)?;
            let trainer = Trainer::from_parts(model, pool, config.train.clone(), state.step)?;
            (trainer, state.elapsed_seconds, false)
        }
        None => {
            let model = build_model(config, &train)?;
            (Trainer::new(model, config.train.clone())?, 0.0, true)
        }
    };
    if fresh {
        std::fs::write(out_dir.join("config.toml"), config.to_toml_string()?)?;
    }

    let mut recorder = Recorder {
        out: Outputs::open(&out_dir, fresh)?,
        config,
        train: &train,
        test: test.as_ref(),
        ais,
        checkpoint_dir,
        elapsed,
        epoch_start: Instant::now(),
        reports: Vec::new(),
        last_eval: None,
    };
    if fresh {
        recorder.evaluate(&trainer.model, 0)?;
        let eval = recorder.last_eval.clone();
        recorder.write_metrics(0, 0, eval.as_ref())?;
        recorder.out.flush()?;
    }

    let mut trainer = trainer;
    recorder.epoch_start = Instant::now();
    let result = trainer.run(&train.rows, &mut recorder);
    recorder.out.flush()?;
    if let Err(Error::TrainingAborted { last_finite, .. }) = &result {
        save_model(out_dir.join("aborted.model"), last_finite)?;
    }
    result?;
    Ok(RunSummary {
        out_dir,
        epochs_completed: trainer.state.epoch,
        updates: trainer.state.update,
        last_eval: recorder.last_eval,
    })
}
