//! Likelihood evaluation: exhaustive oracles for small models and annealed
//! importance sampling for the rest.

pub mod ais;
pub mod enumerate;
pub mod exact;

pub use ais::{ais_log_z, AisConfig, AisEstimate, BaseRate};
pub use enumerate::{joint_distribution, posterior_distribution, WeightedStates, ENUMERATION_CAP};
pub use exact::{
    damped_solve, exact_fim, exact_log_marginal, exact_log_z, exact_loglik, exact_loglik_given_log_z,
    exact_natural_gradient, exact_nll_gradient, exact_summary, expected_energy_grad, ExactSummary, FimForm,
};

use crate::error::Result;
use crate::inference::mean_field_posterior;
use crate::model::{DbmModel, EnergyModel};

/// Mean-field lower bound on the mean of `log p(v)`:
/// `-E_q[E(v, h)] + H(q) - log Z` with `q` the factorised posterior.
///
/// Used when the hidden layers are too large to marginalise exactly; `log_z`
/// typically comes from [`ais_log_z`].
pub fn mean_field_loglik_bound(model: &DbmModel, data: &[Vec<f64>], iterations: usize, log_z: f64) -> Result<f64> {
    let states = mean_field_posterior(model, data, iterations)?;
    let nv = model.num_visible();
    let mut total = 0.0;
    for s in &states {
        // the energy is multilinear and q factorises, so E_q[E] = E(mu)
        let mut bound = -model.energy_flat(s.as_flat());
        for &mu in &s.as_flat()[nv..] {
            if mu > 0.0 && mu < 1.0 {
                bound -= mu * mu.ln() + (1.0 - mu) * (1.0 - mu).ln();
            }
        }
        total += bound - log_z;
    }
    Ok(total / data.len() as f64)
}

/// `log sum_{odd layers} exp(-E(x))` with every even layer fixed by `x`.
///
/// Odd units only couple to even layers, so each sums out to a softplus.
pub fn odd_marginal_log_weight(model: &DbmModel, x: &[f64], scratch: &mut Vec<f64>) -> f64 {
    let mut out = 0.0;
    for l in (0..model.num_layers()).step_by(2) {
        let xs = &x[model.unit_range(l)];
        out += xs
            .iter()
            .zip(model.layer_offsets(l))
            .zip(model.bias(l))
            .map(|((&xi, &ci), &bi)| bi * (xi - ci))
            .sum::<f64>();
    }
    for l in (1..model.num_layers()).step_by(2) {
        scratch.resize(model.layer_sizes()[l], 0.0);
        model.layer_input(x, l, scratch);
        for (&f, &c) in scratch.iter().zip(model.layer_offsets(l)) {
            out += ais::softplus(f) - c * f;
        }
    }
    out
}

/// Hidden units that [`dbm_log_marginal`] has to enumerate.
pub fn even_hidden_units(model: &DbmModel) -> usize {
    (2..model.num_layers()).step_by(2).map(|l| model.layer_sizes()[l]).sum()
}

/// `log sum_h exp(-E(v, h))` for a DBM, summing odd layers in closed form and
/// enumerating the even hidden layers. Agrees with [`exact_log_marginal`] but
/// scales with the even hidden layers only.
pub fn dbm_log_marginal(model: &DbmModel, visible: &[f64]) -> Result<f64> {
    let nv = model.num_visible();
    crate::error::check_len("visible vector", nv, visible.len())?;
    let free: Vec<usize> = (2..model.num_layers())
        .step_by(2)
        .flat_map(|l| model.unit_range(l))
        .collect();
    if free.len() > ENUMERATION_CAP {
        return Err(crate::Error::EnumerationCap {
            units: free.len(),
            cap: ENUMERATION_CAP,
        });
    }
    let mut x = visible.to_vec();
    x.resize(model.num_units(), 0.0);
    let mut scratch = Vec::new();
    let mut acc = enumerate::LogSumExp::new();
    for bits in 0u64..1 << free.len() {
        for (i, &u) in free.iter().enumerate() {
            x[u] = ((bits >> i) & 1) as f64;
        }
        acc.push(odd_marginal_log_weight(model, &x, &mut scratch));
    }
    Ok(acc.value())
}

/// Mean of `log p(v)` via [`dbm_log_marginal`] and a given `log Z`.
pub fn dbm_loglik_given_log_z(model: &DbmModel, data: &[Vec<f64>], log_z: f64) -> Result<f64> {
    use rayon::prelude::*;
    if data.is_empty() {
        return Err(crate::Error::InvalidArgument("empty dataset".into()));
    }
    let parts: Vec<f64> = data
        .par_iter()
        .map(|v| dbm_log_marginal(model, v))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum::<f64>() / data.len() as f64 - log_z)
}
