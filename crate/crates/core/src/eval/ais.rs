//! Annealed importance sampling estimate of `log Z` for a DBM.
//!
//! The chain anneals from a zero-weight base-rate model `p_A` to the target
//! `p_B` through `p_beta ∝ p_A^(1 - beta) p_B^beta`. Odd layers are summed
//! out analytically, so particles only carry even layers and every
//! importance-weight increment is computed on the odd-marginalised
//! distribution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::inference::sigmoid;
use crate::model::DbmModel;

/// Visible biases are clipped to this magnitude when fit to data.
pub const BASE_RATE_CLIP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AisConfig {
    pub n_particles: usize,
    pub betas: Vec<f64>,
    pub seed: u64,
}

impl AisConfig {
    /// `n_betas` linearly spaced inverse temperatures from 0 to 1 inclusive.
    pub fn linear(n_particles: usize, n_betas: usize, seed: u64) -> Self {
        let betas = (0..n_betas).map(|i| i as f64 / (n_betas - 1) as f64).collect();
        Self {
            n_particles,
            betas,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidArgument("AIS needs at least one particle".into()));
        }
        let b = &self.betas;
        if b.len() < 2 || b[0] != 0.0 || *b.last().unwrap() != 1.0 {
            return Err(Error::InvalidArgument(
                "beta schedule must start at 0 and end at 1".into(),
            ));
        }
        if b.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "beta schedule must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

impl Default for AisConfig {
    fn default() -> Self {
        Self::linear(100, 1000, 0)
    }
}

/// Zero-weight base-rate model: visible biases fit by maximum likelihood,
/// every hidden bias zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseRate {
    pub visible_bias: Vec<f64>,
}

impl BaseRate {
    pub fn from_data(data: &[Vec<f64>], n_visible: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let mut mean = vec![0.0; n_visible];
        for row in data {
            check_len("data row", n_visible, row.len())?;
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let visible_bias = mean
            .iter()
            .map(|m| {
                let p = m / data.len() as f64;
                (p.ln() - (1.0 - p).ln()).clamp(-BASE_RATE_CLIP, BASE_RATE_CLIP)
            })
            .collect();
        Ok(Self { visible_bias })
    }

    /// Closed-form `log Z_A` for a base-rate model with the given layers.
    pub fn log_z(&self, layer_sizes: &[usize]) -> f64 {
        let hidden: usize = layer_sizes[1..].iter().sum();
        self.visible_bias.iter().map(|&b| softplus(b)).sum::<f64>() + hidden as f64 * std::f64::consts::LN_2
    }

    /// The base-rate distribution as an (uncentered) DBM.
    pub fn as_model(&self, layer_sizes: &[usize]) -> Result<DbmModel> {
        let mut m = DbmModel::new(layer_sizes)?;
        check_len("base-rate biases", layer_sizes[0], self.visible_bias.len())?;
        m.bias_mut(0).copy_from_slice(&self.visible_bias);
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AisEstimate {
    pub log_z: f64,
    pub log_weight_variance: f64,
    pub n_particles: usize,
    pub n_betas: usize,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct Annealer<'a> {
    model: &'a DbmModel,
    base: &'a [f64],
    even: Vec<usize>,
    odd: Vec<usize>,
}

impl Annealer<'_> {
    /// `log p*_hi(x) - log p*_lo(x)` for the odd-marginalised unnormalised
    /// densities at two inverse temperatures.
    fn log_ratio(&self, x: &[f64], hi: f64, lo: f64, scratch: &mut Vec<f64>) -> f64 {
        let m = self.model;
        let mut linear = 0.0;
        for &l in &self.even {
            let xs = &x[m.unit_range(l)];
            let c = m.layer_offsets(l);
            for (i, ((&xi, &ci), &bi)) in xs.iter().zip(c).zip(m.bias(l)).enumerate() {
                let mut term = bi * (xi - ci);
                if l == 0 {
                    term -= self.base[i] * xi;
                }
                linear += term;
            }
        }
        let mut out = (hi - lo) * linear;
        for &l in &self.odd {
            scratch.resize(m.layer_sizes()[l], 0.0);
            // odd units interact only with even layers, so their current value is irrelevant
            m.layer_input(x, l, scratch);
            for (&f, &c) in scratch.iter().zip(m.layer_offsets(l)) {
                out += (softplus(hi * f) - c * hi * f) - (softplus(lo * f) - c * lo * f);
            }
        }
        out
    }

    fn sample_layer(&self, x: &mut [f64], l: usize, beta: f64, rng: &mut ChaCha8Rng, scratch: &mut Vec<f64>) {
        let m = self.model;
        scratch.resize(m.layer_sizes()[l], 0.0);
        m.layer_input(x, l, scratch);
        let range = m.unit_range(l);
        for (i, u) in range.enumerate() {
            let mut input = beta * scratch[i];
            if l == 0 {
                input += (1.0 - beta) * self.base[i];
            }
            x[u] = (rng.random::<f64>() < sigmoid(input)) as u8 as f64;
        }
    }

    fn run_particle(&self, betas: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        let m = self.model;
        let mut x = vec![0.0; m.offsets().len()];
        let mut scratch = Vec::new();
        for (i, u) in m.unit_range(0).enumerate() {
            x[u] = (rng.random::<f64>() < sigmoid(self.base[i])) as u8 as f64;
        }
        for &l in self.even.iter().filter(|&&l| l > 0) {
            for u in m.unit_range(l) {
                x[u] = (rng.random::<f64>() < 0.5) as u8 as f64;
            }
        }
        let mut log_w = 0.0;
        for k in 1..betas.len() {
            log_w += self.log_ratio(&x, betas[k], betas[k - 1], &mut scratch);
            if k + 1 < betas.len() {
                for &l in &self.odd {
                    self.sample_layer(&mut x, l, betas[k], rng, &mut scratch);
                }
                for &l in &self.even {
                    self.sample_layer(&mut x, l, betas[k], rng, &mut scratch);
                }
            }
        }
        log_w
    }
}

/// AIS estimate of `log Z` for `model`, annealing from `base`.
pub fn ais_log_z(model: &DbmModel, base: &BaseRate, config: &AisConfig) -> Result<AisEstimate> {
    config.validate()?;
    check_len("base-rate biases", model.layer_sizes()[0], base.visible_bias.len())?;
    let layers = model.num_layers();
    let annealer = Annealer {
        model,
        base: &base.visible_bias,
        even: (0..layers).step_by(2).collect(),
        odd: (1..layers).step_by(2).collect(),
    };
    let log_w: Vec<f64> = (0..config.n_particles)
        .into_par_iter()
        .map(|p| {
            let mut rng = crate::rng::stream_rng(config.seed, crate::rng::AIS, p as u64);
            annealer.run_particle(&config.betas, &mut rng)
        })
        .collect();
    if let Some((p, w)) = log_w.iter().enumerate().find(|(_, w)| !w.is_finite()) {
        return Err(Error::NonFinite(format!(
            "AIS log weight of particle {p} is {w} ({} of {} particles non-finite)",
            log_w.iter().filter(|w| !w.is_finite()).count(),
            log_w.len()
        )));
    }
    let n = log_w.len() as f64;
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_mean_w = max + (log_w.iter().map(|w| (w - max).exp()).sum::<f64>() / n).ln();
    let mean = log_w.iter().sum::<f64>() / n;
    let var = log_w.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    Ok(AisEstimate {
        log_z: base.log_z(model.layer_sizes()) + log_mean_w,
        log_weight_variance: var,
        n_particles: config.n_particles,
        n_betas: config.betas.len(),
    })
}
