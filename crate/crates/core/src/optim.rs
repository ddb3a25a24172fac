//! Update rules and the training loop.
//!
//! Every algorithm shares the same sampling: a positive phase on the
//! minibatch, `k_sweeps` sweeps of the persistent negative chains, and the
//! stochastic NLL gradient `g = mean(s+) - mean(s-)` of per-sample energy
//! gradients. They differ only in the direction `Δθ` built from `g`:
//!
//! * MFNG solves `(L + αI) Δθ = g` with the matrix-free metric of the
//!   negative samples;
//! * MFNG-diag divides by `diag(L) + α`;
//! * SML uses `g` itself.
//!
//! Parameters move by `θ <- θ - learning_rate * Δθ`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::eval::ais::BASE_RATE_CLIP;
use crate::inference::{positive_phase, sample_negative, ChainPool, InferenceConfig};
use crate::metric::{MetricOperator, SampleMatrix};
use crate::model::{DbmModel, JointState, ParamVector};
use crate::rng::{stream_rng, INIT, SHUFFLE};
use crate::solver::{solve, Preconditioner, PreconditionerKind, SolveResult, SolverConfig, Termination};

/// Learning rates from the reference experiments.
pub const GRID_LEARNING_RATES: [f64; 3] = [5e-3, 1e-3, 1e-4];
/// Minibatch sizes from the reference experiments.
pub const GRID_BATCH_SIZES: [usize; 3] = [25, 128, 256];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Mfng,
    MfngDiag,
    Sml,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Mfng, Algorithm::MfngDiag, Algorithm::Sml];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mfng => "mfng",
            Algorithm::MfngDiag => "mfng_diag",
            Algorithm::Sml => "sml",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm `{s}` (expected mfng, mfng_diag or sml)")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

/// Whether phase durations are measured. With `Disabled` every duration is
/// recorded as zero, which makes logs byte-reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    #[default]
    Wall,
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Persistent chains; `None` ties the pool size to `batch_size`.
    pub chains: Option<usize>,
    pub epochs: usize,
    /// Gibbs sweeps of the negative chains per update.
    pub k_sweeps: usize,
    pub inference: InferenceConfig,
    pub solver: SolverConfig,
    pub damping: f64,
    pub seed: u64,
    pub clock: Clock,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Mfng,
            learning_rate: 5e-3,
            batch_size: 25,
            chains: None,
            epochs: 10,
            k_sweeps: 5,
            inference: InferenceConfig::default(),
            solver: SolverConfig::default(),
            damping: 0.1,
            seed: 0,
            clock: Clock::Wall,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.chains == Some(0) {
            return Err(Error::Config("chains must be >= 1".into()));
        }
        if self.k_sweeps == 0 {
            return Err(Error::Config("k_sweeps must be >= 1".into()));
        }
        if !(self.damping >= 0.0) || !self.damping.is_finite() {
            return Err(Error::Config(format!("damping must be >= 0, got {}", self.damping)));
        }
        if self.algorithm == Algorithm::MfngDiag && self.damping == 0.0 {
            return Err(Error::Config("mfng_diag needs damping > 0".into()));
        }
        self.inference.validate()?;
        self.solver.validate()
    }

    pub fn num_chains(&self) -> usize {
        self.chains.unwrap_or(self.batch_size)
    }

    /// True when learning rate and batch size both come from the reference grid.
    pub fn in_standard_grid(&self) -> bool {
        GRID_LEARNING_RATES.contains(&self.learning_rate) && GRID_BATCH_SIZES.contains(&self.batch_size)
    }
}

/// Per-phase durations of one update, in nanoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub pos_phase: u64,
    pub neg_phase: u64,
    pub build_s: u64,
    pub solve: u64,
    pub apply: u64,
    pub total: u64,
}

impl PhaseTimings {
    pub fn phase_sum(&self) -> u64 {
        self.pos_phase + self.neg_phase + self.build_s + self.solve + self.apply
    }
}

struct Stopwatch(Clock);

impl Stopwatch {
    fn time<T>(&self, slot: &mut u64, f: impl FnOnce() -> T) -> T {
        match self.0 {
            Clock::Disabled => f(),
            Clock::Wall => {
                let start = Instant::now();
                let out = f();
                *slot += start.elapsed().as_nanos() as u64;
                out
            }
        }
    }
}

/// Solver outcome without the solution vector, as written to the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub final_relative_residual: f64,
    pub estimated_relative_residual: f64,
    pub termination: Termination,
    pub residual_trace: Vec<f64>,
}

impl From<&SolveResult> for SolveDiagnostics {
    fn from(r: &SolveResult) -> Self {
        Self {
            iterations: r.iterations,
            final_relative_residual: r.final_relative_residual,
            estimated_relative_residual: r.estimated_relative_residual,
            termination: r.termination,
            residual_trace: r.residual_trace.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    /// 1-based epoch the update belongs to.
    pub epoch: usize,
    pub update: u64,
    pub gradient_norm: f64,
    pub natural_gradient_norm: f64,
    pub solver: Option<SolveDiagnostics>,
    /// The solve broke down and the plain gradient was used instead.
    pub fallback: bool,
    pub timings: PhaseTimings,
}

/// Search direction and what went into it.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub delta: Vec<f64>,
    pub gradient: Vec<f64>,
    pub solver: Option<SolveDiagnostics>,
    pub fallback: bool,
}

fn norm(v: &[f64]) -> f64 {
    crate::model::dot(v, v).sqrt()
}

/// Stochastic NLL gradient `mean(s+) - mean(s-)` from positive and negative states.
///
/// The two sets may differ in size; each is averaged on its own.
pub fn nll_gradient(model: &DbmModel, positive: &[JointState], negative: &[JointState]) -> Result<ParamVector> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::InvalidArgument(
            "positive and negative sets must be nonempty".into(),
        ));
    }
    let pos = SampleMatrix::from_states(model, positive)?;
    let neg = SampleMatrix::from_states(model, negative)?;
    ParamVector::from_values(model.param_vector().layout().clone(), weighted_gradient(&pos, &neg))
}

/// `mean(s+) - mean(s-)` for weighted sample matrices.
pub fn weighted_gradient(positive: &SampleMatrix, negative: &SampleMatrix) -> Vec<f64> {
    (&positive.mean - &negative.mean).as_slice().to_vec()
}

/// Direction for `algorithm` given positive and negative sample matrices.
///
/// The metric is built from the negative samples. `x0` is the MINRES/CG
/// starting point (zero when `None`).
pub fn direction(
    algorithm: Algorithm,
    positive: &SampleMatrix,
    negative: &SampleMatrix,
    damping: f64,
    solver: &SolverConfig,
    x0: Option<&[f64]>,
) -> Result<Direction> {
    let mut timings = PhaseTimings::default();
    direction_timed(
        algorithm,
        positive,
        negative,
        damping,
        solver,
        x0,
        &Stopwatch(Clock::Disabled),
        &mut timings,
    )
}

#[allow(clippy::too_many_arguments)]
fn direction_timed(
    algorithm: Algorithm,
    positive: &SampleMatrix,
    negative: &SampleMatrix,
    damping: f64,
    solver: &SolverConfig,
    x0: Option<&[f64]>,
    clock: &Stopwatch,
    timings: &mut PhaseTimings,
) -> Result<Direction> {
    check_len(
        "negative sample parameters",
        positive.num_params(),
        negative.num_params(),
    )?;
    let gradient = weighted_gradient(positive, negative);
    if algorithm == Algorithm::Sml {
        return Ok(Direction {
            delta: gradient.clone(),
            gradient,
            solver: None,
            fallback: false,
        });
    }
    let op = clock.time(&mut timings.build_s, || MetricOperator::new(negative, damping))?;
    match algorithm {
        Algorithm::MfngDiag => {
            let delta = clock.time(&mut timings.solve, || {
                let d = op.diagonal();
                gradient.iter().zip(&d).map(|(g, d)| g / d).collect()
            });
            Ok(Direction {
                delta,
                gradient,
                solver: None,
                fallback: false,
            })
        }
        _ => {
            let result = clock.time(&mut timings.solve, || {
                let precond = match solver.preconditioner {
                    PreconditionerKind::None => Preconditioner::None,
                    PreconditionerKind::Jacobi => Preconditioner::Jacobi(op.diagonal()),
                };
                let zeros;
                let start = match x0 {
                    Some(x) => x,
                    None => {
                        zeros = vec![0.0; gradient.len()];
                        &zeros
                    }
                };
                solve(&op, &gradient, start, solver, &precond)
            })?;
            let diagnostics = SolveDiagnostics::from(&result);
            let broke = result.termination == Termination::Breakdown || result.solution.iter().any(|v| !v.is_finite());
            let delta = if broke { gradient.clone() } else { result.solution };
            Ok(Direction {
                delta,
                gradient,
                solver: Some(diagnostics),
                fallback: broke,
            })
        }
    }
}

/// Position within a run, threaded from one update to the next.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    /// Completed epochs.
    pub epoch: usize,
    pub update: u64,
    /// Previous direction, used as the starting point when warm starting.
    pub previous: Option<Vec<f64>>,
}

/// One update: sample both phases, form `Δθ` with `config.algorithm` and
/// apply `θ <- θ - learning_rate * Δθ`. The pool is advanced in place.
pub fn train_step(
    model: &mut DbmModel,
    batch: &[Vec<f64>],
    pool: &mut ChainPool,
    config: &TrainConfig,
    state: &mut StepState,
) -> Result<UpdateReport> {
    let (delta, mut report) = iteration(model, batch, pool, config, state)?;
    let clock = Stopwatch(config.clock);
    let start = Instant::now();
    clock.time(&mut report.timings.apply, || {
        apply_update(model, &delta, config.learning_rate, state)
    })?;
    if config.clock == Clock::Wall {
        report.timings.total += start.elapsed().as_nanos() as u64;
        report.timings.total = report.timings.total.max(report.timings.phase_sum());
    }
    state.update += 1;
    Ok(report)
}

/// `θ <- θ - learning_rate * Δθ`, aborting if any parameter becomes non-finite.
pub fn apply_update(model: &mut DbmModel, delta: &ParamVector, learning_rate: f64, state: &StepState) -> Result<()> {
    let before = model.param_vector().clone();
    model.param_vector_mut().axpy(-learning_rate, delta);
    if model.param_vector().is_finite() {
        return Ok(());
    }
    let bad = model.param_vector().values().iter().filter(|v| !v.is_finite()).count();
    *model.param_vector_mut() = before;
    Err(Error::TrainingAborted {
        epoch: state.epoch + 1,
        update: state.update as usize,
        reason: format!("{bad} non-finite parameters after update (|Δθ| = {})", delta.norm()),
        last_finite: Box::new(model.clone()),
    })
}

fn iteration(
    model: &DbmModel,
    batch: &[Vec<f64>],
    pool: &mut ChainPool,
    config: &TrainConfig,
    state: &mut StepState,
) -> Result<(ParamVector, UpdateReport)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let start = Instant::now();
    let clock = Stopwatch(config.clock);
    let mut timings = PhaseTimings::default();

    let positive = clock.time(&mut timings.pos_phase, || {
        positive_phase(model, batch, &config.inference, config.seed, state.update << 24)
    })?;
    clock.time(&mut timings.neg_phase, || sample_negative(model, pool, config.k_sweeps))?;
    let (pos, neg) = clock.time(&mut timings.build_s, || {
        Ok::<_, Error>((
            SampleMatrix::from_states(model, &positive)?,
            SampleMatrix::from_states(model, pool.states())?,
        ))
    })?;
    let x0 = if config.solver.warm_start {
        state.previous.as_deref()
    } else {
        None
    };
    let dir = direction_timed(
        config.algorithm,
        &pos,
        &neg,
        config.damping,
        &config.solver,
        x0,
        &clock,
        &mut timings,
    )?;
    if config.clock == Clock::Wall {
        timings.total = start.elapsed().as_nanos() as u64;
    }
    let report = UpdateReport {
        epoch: state.epoch + 1,
        update: state.update,
        gradient_norm: norm(&dir.gradient),
        natural_gradient_norm: norm(&dir.delta),
        solver: dir.solver,
        fallback: dir.fallback,
        timings,
    };
    if config.solver.warm_start {
        state.previous = Some(dir.delta.clone());
    }
    let delta = ParamVector::from_values(model.param_vector().layout().clone(), dir.delta)?;
    Ok((delta, report))
}

fn with_algorithm(config: &TrainConfig, algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        ..config.clone()
    }
}

/// One MFNG iteration. Returns `Δθ` without applying it.
pub fn mfng_iteration(
    model: &DbmModel,
    batch: &[Vec<f64>],
    pool: &mut ChainPool,
    config: &TrainConfig,
    state: &mut StepState,
) -> Result<(ParamVector, UpdateReport)> {
    iteration(model, batch, pool, &with_algorithm(config, Algorithm::Mfng), state)
}

/// One diagonal-metric iteration. Returns `Δθ` without applying it.
pub fn mfng_diag_iteration(
    model: &DbmModel,
    batch: &[Vec<f64>],
    pool: &mut ChainPool,
    config: &TrainConfig,
    state: &mut StepState,
) -> Result<(ParamVector, UpdateReport)> {
    iteration(model, batch, pool, &with_algorithm(config, Algorithm::MfngDiag), state)
}

/// One SML iteration. Returns `Δθ = g` without applying it.
pub fn sml_iteration(
    model: &DbmModel,
    batch: &[Vec<f64>],
    pool: &mut ChainPool,
    config: &TrainConfig,
    state: &mut StepState,
) -> Result<(ParamVector, UpdateReport)> {
    iteration(model, batch, pool, &with_algorithm(config, Algorithm::Sml), state)
}

/// Initial weight distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightInit {
    /// Uniform in `±sqrt(6 / (n_below + n_above))` per weight matrix.
    #[default]
    Glorot,
    /// Uniform in `±scale`.
    Uniform { scale: f64 },
}

impl WeightInit {
    fn scale(self, rows: usize, cols: usize) -> f64 {
        match self {
            WeightInit::Glorot => (6.0 / (rows + cols) as f64).sqrt(),
            WeightInit::Uniform { scale } => scale,
        }
    }
}

/// Starting point for training: visible offsets from the data mean, hidden
/// offsets 0.5, visible biases at the clipped logit of the data mean, hidden
/// biases zero and uniformly drawn weights.
pub fn initial_model(layer_sizes: &[usize], data: &[Vec<f64>], init: WeightInit, seed: u64) -> Result<DbmModel> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if let WeightInit::Uniform { scale } = init {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("weight scale must be >= 0, got {scale}")));
        }
    }
    let nv = layer_sizes.first().copied().unwrap_or(0);
    let mut mean = vec![0.0; nv];
    for row in data {
        check_len("data row", nv, row.len())?;
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / data.len() as f64;
        }
    }
    let mut model = DbmModel::with_data_offsets(layer_sizes, &mean)?;
    let mut rng = stream_rng(seed, INIT, 0);
    for l in 1..layer_sizes.len() {
        let scale = init.scale(layer_sizes[l - 1], layer_sizes[l]);
        for w in model.weights_mut(l) {
            *w = rng.random_range(-1.0..=1.0) * scale;
        }
    }
    for (b, p) in model.bias_mut(0).iter_mut().zip(&mean) {
        *b = (p.ln() - (1.0 - p).ln()).clamp(-BASE_RATE_CLIP, BASE_RATE_CLIP);
    }
    Ok(model)
}

/// Hooks invoked by [`Trainer::run`].
pub trait TrainObserver {
    fn on_update(&mut self, _report: &UpdateReport) -> Result<()> {
        Ok(())
    }

    /// Called after each completed epoch (`trainer.state.epoch` already advanced).
    fn on_epoch(&mut self, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects every update report.
impl TrainObserver for Vec<UpdateReport> {
    fn on_update(&mut self, report: &UpdateReport) -> Result<()> {
        self.push(report.clone());
        Ok(())
    }
}

/// Model, persistent chains and run position.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DbmModel,
    pub pool: ChainPool,
    pub config: TrainConfig,
    pub state: StepState,
}

impl Trainer {
    pub fn new(model: DbmModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let pool = ChainPool::new(&model, config.num_chains(), config.seed)?;
        Ok(Self {
            model,
            pool,
            config,
            state: StepState::default(),
        })
    }

    /// Resumes from saved parts.
    pub fn from_parts(model: DbmModel, pool: ChainPool, config: TrainConfig, state: StepState) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            pool,
            config,
            state,
        })
    }

    /// Runs one epoch: seeded shuffle, then one update per minibatch.
    pub fn run_epoch(&mut self, data: &[Vec<f64>], observer: &mut dyn TrainObserver) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, SHUFFLE, self.state.epoch as u64));
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let report = train_step(&mut self.model, &batch, &mut self.pool, &self.config, &mut self.state)?;
            observer.on_update(&report)?;
        }
        self.state.epoch += 1;
        observer.on_epoch(self)
    }

    /// Runs epochs until `config.epochs` have completed.
    pub fn run(&mut self, data: &[Vec<f64>], observer: &mut dyn TrainObserver) -> Result<()> {
        while self.state.epoch < self.config.epochs {
            self.run_epoch(data, observer)?;
        }
        Ok(())
    }
}

/// Trains `model` on `data` and returns the final model with every update report.
pub fn train(
    model: DbmModel,
    data: &[Vec<f64>],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(DbmModel, Vec<UpdateReport>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    struct Tee<'a> {
        log: Vec<UpdateReport>,
        inner: &'a mut dyn TrainObserver,
    }
    impl TrainObserver for Tee<'_> {
        fn on_update(&mut self, report: &UpdateReport) -> Result<()> {
            self.log.push(report.clone());
            self.inner.on_update(report)
        }
        fn on_epoch(&mut self, trainer: &Trainer) -> Result<()> {
            self.inner.on_epoch(trainer)
        }
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut tee = Tee {
        log: Vec::new(),
        inner: observer,
    };
    trainer.run(data, &mut tee)?;
    Ok((trainer.model, tee.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::exact::{damped_solve, exact_fim, FimForm};
    use crate::eval::{exact_loglik, exact_nll_gradient, joint_distribution, posterior_distribution};
    use crate::inference::InferenceMode;
    use crate::model::EnergyModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(sizes: &[usize], w: f64, seed: u64) -> DbmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = sizes.iter().sum();
        let offsets = (0..total).map(|_| rng.random::<f64>()).collect();
        let mut m = DbmModel::with_offsets(sizes, offsets).unwrap();
        m.randomize(w, 1.0, &mut rng);
        m
    }

    fn random_data(nv: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..nv).map(|_| rng.random_bool(0.5) as u8 as f64).collect())
            .collect()
    }

    fn exact_matrices(model: &DbmModel, data: &[Vec<f64>]) -> (SampleMatrix, SampleMatrix) {
        let pos = posterior_distribution(model, data).unwrap();
        let neg = joint_distribution(model).unwrap();
        (
            SampleMatrix::from_weighted(model, &pos.states, &pos.weights).unwrap(),
            SampleMatrix::from_weighted(model, &neg.states, &neg.weights).unwrap(),
        )
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        num / norm(b)
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: f64::NAN,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                chains: Some(0),
                ..Default::default()
            },
            TrainConfig {
                k_sweeps: 0,
                ..Default::default()
            },
            TrainConfig {
                damping: -1.0,
                ..Default::default()
            },
            TrainConfig {
                algorithm: Algorithm::MfngDiag,
                damping: 0.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn standard_grid_is_admissible() {
        for lr in GRID_LEARNING_RATES {
            for batch_size in GRID_BATCH_SIZES {
                let c = TrainConfig {
                    learning_rate: lr,
                    batch_size,
                    ..Default::default()
                };
                assert!(c.validate().is_ok());
                assert!(c.in_standard_grid());
            }
        }
        assert!(!TrainConfig {
            batch_size: 16,
            ..Default::default()
        }
        .in_standard_grid());
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("adam".parse::<Algorithm>().is_err());
    }

    #[test]
    fn identical_phases_give_zero_gradient() {
        let m = random_model(&[3, 2, 2], 0.5, 1);
        let states: Vec<JointState> = random_data(7, 5, 2)
            .into_iter()
            .map(|x| JointState::from_flat(&[3, 2, 2], x).unwrap())
            .collect();
        let g = nll_gradient(&m, &states, &states).unwrap();
        assert_eq!(g.len(), m.num_params());
        assert!(g.values().iter().all(|&v| v == 0.0));
        assert!(nll_gradient(&m, &[], &states).is_err());
    }

    #[test]
    fn gradient_with_exact_expectations_matches_finite_differences() {
        let m = random_model(&[3, 2, 1], 0.8, 3);
        let data = random_data(3, 4, 4);
        let (pos, neg) = exact_matrices(&m, &data);
        let g = weighted_gradient(&pos, &neg);
        let h = 1e-5;
        for j in 0..m.num_params() {
            let mut p = m.param_vector().values().to_vec();
            p[j] += h;
            let up = m.with_params(&p);
            p[j] -= 2.0 * h;
            let down = m.with_params(&p);
            let fd = -(exact_loglik(&up, &data).unwrap() - exact_loglik(&down, &data).unwrap()) / (2.0 * h);
            assert!((g[j] - fd).abs() < 1e-6, "param {j}: {} vs {fd}", g[j]);
        }
        let oracle = exact_nll_gradient(&m, &data).unwrap();
        assert!(rel_err(&g, &oracle) < 1e-12);
    }

    #[test]
    fn exact_mfng_direction_matches_dense_natural_gradient() {
        let m = random_model(&[4, 3, 2], 0.5, 5);
        let data = random_data(4, 6, 6);
        let (pos, neg) = exact_matrices(&m, &data);
        let dir = direction(Algorithm::Mfng, &pos, &neg, 0.1, &SolverConfig::default(), None).unwrap();
        let fim = exact_fim(&m, FimForm::Covariance).unwrap();
        let dense = damped_solve(&fim, &dir.gradient, 0.1);
        assert!(rel_err(&dir.delta, &dense) <= 1e-4);
        assert!(!dir.fallback);
        assert!(crate::model::dot(&dir.delta, &dir.gradient) >= 0.0);
    }

    #[test]
    fn diagonal_direction_matches_dense_diagonal() {
        let m = random_model(&[4, 3, 2], 0.5, 7);
        let data = random_data(4, 6, 8);
        let (pos, neg) = exact_matrices(&m, &data);
        let dir = direction(Algorithm::MfngDiag, &pos, &neg, 0.1, &SolverConfig::default(), None).unwrap();
        let fim = exact_fim(&m, FimForm::Covariance).unwrap();
        for j in 0..dir.delta.len() {
            let expected = dir.gradient[j] / (fim[(j, j)] + 0.1);
            assert!((dir.delta[j] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            assert!(dir.delta[j] == 0.0 || dir.delta[j].signum() == dir.gradient[j].signum());
        }
    }

    #[test]
    fn zero_variance_negatives_give_gradient_over_damping() {
        let m = random_model(&[3, 2], 0.5, 9);
        let x = JointState::from_flat(&[3, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let neg = SampleMatrix::from_states(&m, &vec![x; 4]).unwrap();
        let pos_states: Vec<JointState> = random_data(5, 3, 10)
            .into_iter()
            .map(|v| JointState::from_flat(&[3, 2], v).unwrap())
            .collect();
        let pos = SampleMatrix::from_states(&m, &pos_states).unwrap();
        let diag = direction(Algorithm::MfngDiag, &pos, &neg, 0.1, &SolverConfig::default(), None).unwrap();
        let full = direction(Algorithm::Mfng, &pos, &neg, 0.1, &SolverConfig::default(), None).unwrap();
        for ((d, f), g) in diag.delta.iter().zip(&full.delta).zip(&diag.gradient) {
            assert!((d - g / 0.1).abs() < 1e-12);
            assert!((f - g / 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn sml_equals_diagonal_with_unit_divisor() {
        let m = random_model(&[3, 2], 0.5, 11);
        let x = JointState::from_flat(&[3, 2], vec![0.0; 5]).unwrap();
        let neg = SampleMatrix::from_states(&m, &[x]).unwrap();
        let pos = SampleMatrix::from_states(&m, &[JointState::from_flat(&[3, 2], vec![1.0; 5]).unwrap()]).unwrap();
        let sml = direction(Algorithm::Sml, &pos, &neg, 0.1, &SolverConfig::default(), None).unwrap();
        let diag = direction(Algorithm::MfngDiag, &pos, &neg, 1.0, &SolverConfig::default(), None).unwrap();
        assert_eq!(sml.delta, diag.delta);
        assert_eq!(sml.delta, sml.gradient);
    }

    #[test]
    fn zero_gradient_gives_zero_direction() {
        let m = random_model(&[3, 2], 0.5, 12);
        let states: Vec<JointState> = random_data(5, 4, 13)
            .into_iter()
            .map(|v| JointState::from_flat(&[3, 2], v).unwrap())
            .collect();
        let s = SampleMatrix::from_states(&m, &states).unwrap();
        for a in Algorithm::ALL {
            let dir = direction(a, &s, &s, 0.1, &SolverConfig::default(), None).unwrap();
            assert!(dir.delta.iter().all(|&v| v == 0.0), "{a}");
        }
    }

    #[test]
    fn breakdown_falls_back_to_gradient() {
        let m = random_model(&[2, 1], 0.5, 14);
        let pos = SampleMatrix::from_states(&m, &[JointState::from_flat(&[2, 1], vec![1.0; 3]).unwrap()]).unwrap();
        let mut neg = SampleMatrix::from_states(&m, &[JointState::from_flat(&[2, 1], vec![0.0; 3]).unwrap()]).unwrap();
        neg.rows[(0, 0)] = f64::NAN;
        neg.mean[0] = 0.0;
        let dir = direction(Algorithm::Mfng, &pos, &neg, 0.1, &SolverConfig::default(), None).unwrap();
        assert!(dir.fallback);
        assert_eq!(dir.delta, dir.gradient);
    }

    fn tiny_setup() -> (DbmModel, Vec<Vec<f64>>, TrainConfig) {
        let data = random_data(4, 12, 20);
        let model = initial_model(&[4, 3, 2], &data, WeightInit::Uniform { scale: 0.1 }, 21).unwrap();
        let config = TrainConfig {
            batch_size: 4,
            epochs: 2,
            seed: 22,
            clock: Clock::Disabled,
            ..Default::default()
        };
        (model, data, config)
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let (model, data, config) = tiny_setup();
        let (out, log) = train(model.clone(), &data, &TrainConfig { epochs: 0, ..config }, &mut ()).unwrap();
        assert_eq!(out, model);
        assert!(log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (model, data, config) = tiny_setup();
        for algorithm in Algorithm::ALL {
            let c = TrainConfig {
                algorithm,
                ..config.clone()
            };
            let (m1, l1) = train(model.clone(), &data, &c, &mut ()).unwrap();
            let (m2, l2) = train(model.clone(), &data, &c, &mut ()).unwrap();
            assert_eq!(m1, m2);
            let j1: Vec<String> = l1.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
            let j2: Vec<String> = l2.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
            assert_eq!(j1, j2);
            assert_eq!(l1.len(), 6);
        }
    }

    #[test]
    fn wall_clock_timings_are_consistent() {
        let (model, data, config) = tiny_setup();
        let (_, log) = train(
            model,
            &data,
            &TrainConfig {
                clock: Clock::Wall,
                ..config
            },
            &mut (),
        )
        .unwrap();
        for r in &log {
            assert!(r.timings.phase_sum() <= r.timings.total, "{:?}", r.timings);
            assert!(r.timings.total > 0);
        }
    }

    #[test]
    fn algorithms_consume_identical_random_streams() {
        let (model, data, config) = tiny_setup();
        let mut pools = Vec::new();
        for algorithm in Algorithm::ALL {
            let c = TrainConfig {
                algorithm,
                inference: InferenceConfig {
                    mode: InferenceMode::Gibbs,
                    iterations: 3,
                },
                ..config.clone()
            };
            let mut pool = ChainPool::new(&model, c.num_chains(), c.seed).unwrap();
            let mut state = StepState::default();
            iteration(&model, &data[..4], &mut pool, &c, &mut state).unwrap();
            pools.push(pool);
        }
        assert_eq!(pools[0], pools[1]);
        assert_eq!(pools[1], pools[2]);
    }

    #[test]
    fn wrappers_force_their_algorithm() {
        let (model, data, config) = tiny_setup();
        let mut pool = ChainPool::new(&model, 4, 0).unwrap();
        let (_, r) = mfng_iteration(
            &model,
            &data[..4],
            &mut pool,
            &TrainConfig {
                algorithm: Algorithm::Sml,
                ..config.clone()
            },
            &mut StepState::default(),
        )
        .unwrap();
        assert!(r.solver.is_some());
        let (d, r) = sml_iteration(&model, &data[..4], &mut pool, &config, &mut StepState::default()).unwrap();
        assert!(r.solver.is_none());
        assert_eq!(d.norm(), r.gradient_norm);
        let (_, r) = mfng_diag_iteration(&model, &data[..4], &mut pool, &config, &mut StepState::default()).unwrap();
        assert!(r.solver.is_none());
    }

    #[test]
    fn non_finite_update_aborts_with_last_finite_model() {
        let (mut model, _, _) = tiny_setup();
        let original = model.clone();
        let mut delta = ParamVector::zeros(model.param_vector().layout().clone());
        delta.values_mut()[0] = -f64::MAX;
        let state = StepState {
            epoch: 3,
            update: 17,
            previous: None,
        };
        match apply_update(&mut model, &delta, 10.0, &state) {
            Err(Error::TrainingAborted {
                epoch: 4,
                update: 17,
                last_finite,
                ..
            }) => assert_eq!(*last_finite, original),
            other => panic!("expected abort, got {other:?}"),
        }
        assert_eq!(model, original);
    }

    #[test]
    fn warm_start_reuses_previous_direction() {
        let (model, data, mut config) = tiny_setup();
        config.solver.warm_start = true;
        let mut trainer = Trainer::new(model, config).unwrap();
        let mut log = Vec::new();
        trainer.run_epoch(&data, &mut log).unwrap();
        assert!(trainer.state.previous.is_some());
        assert_eq!(log.len(), 3);
    }

    #[test]
    fn sml_direction_is_unbiased_for_the_exact_gradient() {
        let model = random_model(&[3, 2], 0.5, 30);
        let data = random_data(3, 4, 31);
        let exact = exact_nll_gradient(&model, &data).unwrap();
        let config = TrainConfig {
            algorithm: Algorithm::Sml,
            batch_size: 4,
            chains: Some(8),
            k_sweeps: 30,
            inference: InferenceConfig {
                mode: InferenceMode::Gibbs,
                iterations: 30,
            },
            clock: Clock::Disabled,
            ..Default::default()
        };
        let runs = 200;
        let samples: Vec<Vec<f64>> = (0..runs)
            .map(|seed| {
                let c = TrainConfig { seed, ..config.clone() };
                let mut pool = ChainPool::new(&model, c.num_chains(), seed).unwrap();
                let (d, _) = iteration(&model, &data, &mut pool, &c, &mut StepState::default()).unwrap();
                d.into_values()
            })
            .collect();
        for j in 0..exact.len() {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / runs as f64;
            let var = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
            let se = (var / runs as f64).sqrt();
            assert!(
                (mean - exact[j]).abs() <= 3.0 * se + 1e-3,
                "param {j}: {mean} vs {} (se {se})",
                exact[j]
            );
        }
    }

    #[test]
    fn training_improves_exact_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let data: Vec<Vec<f64>> = (0..16)
            .map(|i| {
                let on = i % 2 == 0;
                (0..6)
                    .map(|j| ((j < 3) == on) as u8 as f64)
                    .map(|v| if rng.random_bool(0.1) { 1.0 - v } else { v })
                    .collect()
            })
            .collect();
        for algorithm in Algorithm::ALL {
            let model = initial_model(&[6, 4, 2], &data, WeightInit::Uniform { scale: 0.1 }, 41).unwrap();
            let before = exact_loglik(&model, &data).unwrap();
            let config = TrainConfig {
                algorithm,
                learning_rate: 0.2,
                batch_size: 8,
                epochs: 30,
                seed: 42,
                clock: Clock::Disabled,
                ..Default::default()
            };
            let (trained, _) = train(model, &data, &config, &mut ()).unwrap();
            let after = exact_loglik(&trained, &data).unwrap();
            eprintln!("{algorithm}: {before} -> {after}");
            assert!(after > before, "{algorithm}: {after} <= {before}");
        }
    }

    #[test]
    fn initial_model_matches_data_marginals() {
        let data = vec![vec![1.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        let m = initial_model(&[3, 2], &data, WeightInit::Uniform { scale: 0.0 }, 0).unwrap();
        assert_eq!(m.layer_offsets(0), &[1.0, 0.0, 0.5]);
        assert_eq!(m.layer_offsets(1), &[0.5, 0.5]);
        assert_eq!(m.bias(0)[0], BASE_RATE_CLIP);
        assert_eq!(m.bias(0)[1], -BASE_RATE_CLIP);
        assert!(m.bias(1).iter().all(|&b| b == 0.0));
        assert!(m.weights(1).iter().all(|&w| w == 0.0));

        let g = initial_model(&[3, 2], &data, WeightInit::Glorot, 0).unwrap();
        let bound = (6.0f64 / 5.0).sqrt();
        assert!(g.weights(1).iter().all(|w| w.abs() <= bound));
        assert!(g.weights(1).iter().any(|w| w.abs() > 0.1));
    }
}
