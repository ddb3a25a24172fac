//! Positive-phase inference and persistent block-Gibbs chains.
//!
//! Same-parity layers of a DBM are conditionally independent given the other
//! parity, so one sweep samples every odd layer and then every even layer.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{DbmModel, JointState};
use crate::rng::{stream_rng, NEGATIVE_CHAINS};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    MeanField,
    Gibbs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub iterations: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::MeanField,
            iterations: 5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("inference iterations must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_finite_params(model: &DbmModel) -> Result<()> {
    if model.param_vector().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("model parameters".into()))
    }
}

/// Fixed-point mean-field marginals for each visible row.
///
/// Hidden marginals start at the layer offsets and are updated layer by layer
/// (`1..K`) with `mu^(l) = sigmoid(input_l(mu))`, `iterations` times. The
/// returned states carry the clamped visibles and real-valued hidden layers.
pub fn mean_field_posterior(
    model: &DbmModel,
    visible_batch: &[Vec<f64>],
    iterations: usize,
) -> Result<Vec<JointState>> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("mean-field iterations must be >= 1".into()));
    }
    check_finite_params(model)?;
    let nv = model.layer_sizes()[0];
    for row in visible_batch {
        check_len("visible row", nv, row.len())?;
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("visible values must lie in [0, 1]".into()));
        }
    }
    let states = visible_batch
        .par_iter()
        .map(|v| {
            let mut x = model.offsets().to_vec();
            x[..nv].copy_from_slice(v);
            let mut input = Vec::new();
            for _ in 0..iterations {
                for l in 1..model.num_layers() {
                    input.resize(model.layer_sizes()[l], 0.0);
                    model.layer_input(&x, l, &mut input);
                    for (xi, &a) in x[model.unit_range(l)].iter_mut().zip(&input) {
                        *xi = sigmoid(a);
                    }
                }
            }
            JointState::from_flat(model.layer_sizes(), x).expect("sized from the model")
        })
        .collect();
    Ok(states)
}

/// `M` persistent chains, each with its own counter-based random stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainPool {
    states: Vec<JointState>,
    rngs: Vec<ChaCha8Rng>,
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"MFNGPOOL";
const SNAPSHOT_VERSION: u32 = 1;

impl ChainPool {
    /// `chains` states with every unit drawn Bernoulli(offset).
    pub fn new(model: &DbmModel, chains: usize, seed: u64) -> Result<Self> {
        Self::with_purpose(model, chains, seed, NEGATIVE_CHAINS)
    }

    pub(crate) fn with_purpose(model: &DbmModel, chains: usize, seed: u64, purpose: u64) -> Result<Self> {
        if chains == 0 {
            return Err(Error::InvalidArgument("chain pool needs at least one chain".into()));
        }
        let mut states = Vec::with_capacity(chains);
        let mut rngs = Vec::with_capacity(chains);
        for m in 0..chains {
            let mut rng = stream_rng(seed, purpose, m as u64);
            let x = model
                .offsets()
                .iter()
                .map(|&c| (rng.random::<f64>() < c) as u8 as f64)
                .collect();
            states.push(JointState::from_flat(model.layer_sizes(), x)?);
            rngs.push(rng);
        }
        Ok(Self { states, rngs })
    }

    /// Chains started at the given binary states; chain `m` uses stream `m`.
    pub fn from_states(states: Vec<JointState>, seed: u64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidArgument("chain pool needs at least one chain".into()));
        }
        if states.iter().any(|s| !s.is_binary()) {
            return Err(Error::InvalidArgument("chain states must be binary".into()));
        }
        let rngs = (0..states.len())
            .map(|m| stream_rng(seed, NEGATIVE_CHAINS, m as u64))
            .collect();
        Ok(Self { states, rngs })
    }

    pub(crate) fn from_parts(states: Vec<JointState>, rngs: Vec<ChaCha8Rng>) -> Self {
        Self { states, rngs }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[JointState] {
        &self.states
    }

    fn check_model(&self, model: &DbmModel) -> Result<()> {
        for s in &self.states {
            check_len("chain layers", model.num_layers(), s.num_layers())?;
            for (l, &n) in model.layer_sizes().iter().enumerate() {
                check_len("chain layer", n, s.layer(l).len())?;
            }
        }
        Ok(())
    }

    /// Versioned binary snapshot: header, per-chain stream position, packed bits.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let sizes = self.states[0].layer_sizes();
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for &n in &sizes {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        w.write_all(&(self.states.len() as u32).to_le_bytes())?;
        for (s, rng) in self.states.iter().zip(&self.rngs) {
            w.write_all(&rng.get_seed())?;
            w.write_all(&rng.get_stream().to_le_bytes())?;
            w.write_all(&rng.get_word_pos().to_le_bytes())?;
            let flat = s.as_flat();
            let mut packed = vec![0u8; flat.len().div_ceil(8)];
            for (i, &v) in flat.iter().enumerate() {
                if v != 0.0 {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            w.write_all(&packed)?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        let magic: [u8; 8] = r.array()?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(r.error("bad chain-pool snapshot magic"));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(r.error(&format!("unsupported chain-pool snapshot version {version}")));
        }
        let n_layers = r.u32()? as usize;
        let sizes = (0..n_layers)
            .map(|_| r.u32().map(|n| n as usize))
            .collect::<Result<Vec<_>>>()?;
        let units: usize = sizes.iter().sum();
        let chains = r.u32()? as usize;
        if chains == 0 {
            return Err(r.error("snapshot holds no chains"));
        }
        let mut states = Vec::with_capacity(chains);
        let mut rngs = Vec::with_capacity(chains);
        for _ in 0..chains {
            let seed: [u8; 32] = r.array()?;
            let stream = u64::from_le_bytes(r.array()?);
            let word_pos = u128::from_le_bytes(r.array()?);
            let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            let packed = r.bytes(units.div_ceil(8))?;
            let flat = (0..units).map(|i| ((packed[i / 8] >> (i % 8)) & 1) as f64).collect();
            states.push(JointState::from_flat(&sizes, flat)?);
            rngs.push(rng);
        }
        if !r.at_end() {
            return Err(r.error("trailing bytes after chain-pool snapshot"));
        }
        Ok(Self { states, rngs })
    }
}

/// Little-endian reader that reports the byte offset of failures.
pub(crate) struct ByteReader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn error(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.offset,
            message: message.to_string(),
        }
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.error(&format!("truncated input, expected {n} more bytes")))?;
        self.offset += n;
        Ok(buf)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let v = self.bytes(N)?;
        Ok(v.try_into().expect("length checked"))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn at_end(&mut self) -> bool {
        let mut b = [0u8; 1];
        matches!(self.inner.read(&mut b), Ok(0))
    }
}

fn sample_layer(model: &DbmModel, x: &mut [f64], l: usize, rng: &mut ChaCha8Rng, input: &mut Vec<f64>) {
    input.resize(model.layer_sizes()[l], 0.0);
    model.layer_input(x, l, input);
    for (xi, &a) in x[model.unit_range(l)].iter_mut().zip(input.iter()) {
        *xi = (rng.random::<f64>() < sigmoid(a)) as u8 as f64;
    }
}

fn sweep_chain(model: &DbmModel, state: &mut JointState, rng: &mut ChaCha8Rng, clamp_visible: bool) {
    let mut input = Vec::new();
    let x = state.as_flat_mut();
    for l in (1..model.num_layers()).step_by(2) {
        sample_layer(model, x, l, rng, &mut input);
    }
    let first_even = if clamp_visible { 2 } else { 0 };
    for l in (first_even..model.num_layers()).step_by(2) {
        sample_layer(model, x, l, rng, &mut input);
    }
}

const PARALLEL_CHAINS: usize = 16;

/// One block-Gibbs sweep of every chain: odd layers given even, then even
/// layers given odd. With `clamp_visible` the visible layer is left as is.
pub fn gibbs_sweep(model: &DbmModel, pool: &mut ChainPool, clamp_visible: bool) -> Result<()> {
    pool.check_model(model)?;
    if pool.rngs.len() >= PARALLEL_CHAINS {
        pool.states
            .par_iter_mut()
            .zip(pool.rngs.par_iter_mut())
            .for_each(|(s, rng)| sweep_chain(model, s, rng, clamp_visible));
    } else {
        for (s, rng) in pool.states.iter_mut().zip(pool.rngs.iter_mut()) {
            sweep_chain(model, s, rng, clamp_visible);
        }
    }
    Ok(())
}

/// Advances the persistent negative chains by `k_sweeps` unclamped sweeps.
pub fn sample_negative(model: &DbmModel, pool: &mut ChainPool, k_sweeps: usize) -> Result<()> {
    if k_sweeps == 0 {
        return Err(Error::InvalidArgument("k_sweeps must be >= 1".into()));
    }
    for _ in 0..k_sweeps {
        gibbs_sweep(model, pool, false)?;
    }
    Ok(())
}

/// Positive phase by clamped Gibbs sampling: one chain per visible row,
/// hidden units started Bernoulli(offset), `iterations` clamped sweeps.
pub fn gibbs_posterior(
    model: &DbmModel,
    visible_batch: &[Vec<f64>],
    iterations: usize,
    seed: u64,
    stream_base: u64,
) -> Result<Vec<JointState>> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("Gibbs iterations must be >= 1".into()));
    }
    let nv = model.layer_sizes()[0];
    let mut states = Vec::with_capacity(visible_batch.len());
    let mut rngs = Vec::with_capacity(visible_batch.len());
    for (m, v) in visible_batch.iter().enumerate() {
        check_len("visible row", nv, v.len())?;
        let mut rng = stream_rng(seed, crate::rng::POSITIVE_CHAINS, stream_base + m as u64);
        let mut x: Vec<f64> = v.clone();
        x.extend(
            model.offsets()[nv..]
                .iter()
                .map(|&c| (rng.random::<f64>() < c) as u8 as f64),
        );
        states.push(JointState::from_flat(model.layer_sizes(), x)?);
        rngs.push(rng);
    }
    let mut pool = ChainPool::from_parts(states, rngs);
    for _ in 0..iterations {
        gibbs_sweep(model, &mut pool, true)?;
    }
    Ok(pool.states)
}

/// Runs the configured positive-phase inference.
pub fn positive_phase(
    model: &DbmModel,
    visible_batch: &[Vec<f64>],
    config: &InferenceConfig,
    seed: u64,
    stream_base: u64,
) -> Result<Vec<JointState>> {
    config.validate()?;
    match config.mode {
        InferenceMode::MeanField => mean_field_posterior(model, visible_batch, config.iterations),
        InferenceMode::Gibbs => gibbs_posterior(model, visible_batch, config.iterations, seed, stream_base),
    }
}
