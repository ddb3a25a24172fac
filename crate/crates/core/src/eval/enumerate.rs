//! Exhaustive state enumeration.
//!
//! Sums run in Gray-code order so each step flips a single unit and the
//! energy is updated through [`EnergyModel::local_field`]. Large sums are
//! split on their highest free units into chunks that run in parallel; the
//! chunk results are reduced in chunk order so the output does not depend on
//! scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::EnergyModel;

/// Largest number of free units any exhaustive sum may range over.
pub const ENUMERATION_CAP: usize = 24;

const SERIAL_BITS: usize = 10;
const MAX_SPLIT_BITS: usize = 8;

pub(crate) fn check_cap(units: usize) -> Result<()> {
    if units > ENUMERATION_CAP {
        Err(Error::EnumerationCap {
            units,
            cap: ENUMERATION_CAP,
        })
    } else {
        Ok(())
    }
}

/// Streaming log-sum-exp accumulator.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn push(&mut self, v: f64) {
        if v <= self.max {
            self.sum += (v - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    pub fn merge(&mut self, other: LogSumExp) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if other.max <= self.max {
            self.sum += other.sum * (other.max - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            self.max = other.max;
        }
    }

    pub fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// `log sum exp(-E(x))` over all assignments of the `free` units, with every
/// other unit held at its value in `base`.
pub fn log_sum_exp_neg_energy<M: EnergyModel>(model: &M, base: &[f64], free: &[usize]) -> Result<f64> {
    check_cap(free.len())?;
    let split = free.len().saturating_sub(SERIAL_BITS).min(MAX_SPLIT_BITS);
    let (low, high) = free.split_at(free.len() - split);
    let chunks: Vec<LogSumExp> = (0..1usize << split)
        .into_par_iter()
        .map(|chunk| {
            let mut x = base.to_vec();
            for &u in free {
                x[u] = 0.0;
            }
            for (bit, &u) in high.iter().enumerate() {
                x[u] = ((chunk >> bit) & 1) as f64;
            }
            gray_walk(model, &mut x, low)
        })
        .collect();
    let mut acc = LogSumExp::new();
    for c in chunks {
        acc.merge(c);
    }
    Ok(acc.value())
}

fn gray_walk<M: EnergyModel>(model: &M, x: &mut [f64], free: &[usize]) -> LogSumExp {
    let mut acc = LogSumExp::new();
    let mut energy = model.energy_flat(x);
    acc.push(-energy);
    for step in 1u64..(1u64 << free.len()) {
        let unit = free[step.trailing_zeros() as usize];
        let field = model.local_field(x, unit);
        if x[unit] == 0.0 {
            x[unit] = 1.0;
            energy -= field;
        } else {
            x[unit] = 0.0;
            energy += field;
        }
        acc.push(-energy);
    }
    acc
}

/// Decodes the bitmask `bits` into a flat binary state of `n` units
/// (bit `i` is unit `i`).
pub fn decode_state(bits: u64, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((bits >> i) & 1) as f64).collect()
}

/// States paired with probability weights summing to one.
#[derive(Clone, Debug, Default)]
pub struct WeightedStates {
    pub states: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl WeightedStates {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Uniform weights over the given states.
    pub fn uniform(states: Vec<Vec<f64>>) -> Self {
        let w = 1.0 / states.len() as f64;
        let weights = vec![w; states.len()];
        Self { states, weights }
    }
}

/// Exact joint distribution `p(x)` over every state of the model.
pub fn joint_distribution<M: EnergyModel>(model: &M) -> Result<WeightedStates> {
    let n = model.num_units();
    check_cap(n)?;
    let states: Vec<Vec<f64>> = (0..1u64 << n).map(|b| decode_state(b, n)).collect();
    let neg_e: Vec<f64> = states.par_iter().map(|x| -model.energy_flat(x)).collect();
    Ok(WeightedStates {
        weights: normalize_log_weights(&neg_e),
        states,
    })
}

/// Exact positive-phase distribution: each data row contributes weight
/// `1/|D| * p(h | v)` to the joint states extending it.
pub fn posterior_distribution<M: EnergyModel>(model: &M, data: &[Vec<f64>]) -> Result<WeightedStates> {
    let n = model.num_units();
    let nv = model.num_visible();
    check_cap(n - nv)?;
    let mut out = WeightedStates::default();
    let per_row = 1.0 / data.len() as f64;
    for v in data {
        crate::error::check_len("data row", nv, v.len())?;
        let states: Vec<Vec<f64>> = (0..1u64 << (n - nv))
            .map(|bits| {
                let mut x = v.clone();
                x.extend(decode_state(bits, n - nv));
                x
            })
            .collect();
        let neg_e: Vec<f64> = states.iter().map(|x| -model.energy_flat(x)).collect();
        for (x, w) in states.into_iter().zip(normalize_log_weights(&neg_e)) {
            out.states.push(x);
            out.weights.push(w * per_row);
        }
    }
    Ok(out)
}

fn normalize_log_weights(logw: &[f64]) -> Vec<f64> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|u| u / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GenericBm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_sum_exp_accumulator_matches_direct() {
        let vals = [0.3, -2.0, 5.0, 1.0, 4.9];
        let mut acc = LogSumExp::new();
        for v in vals {
            acc.push(v);
        }
        let direct: f64 = vals.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((acc.value() - direct).abs() < 1e-14);
    }

    #[test]
    fn gray_sum_matches_direct_sum_with_chunking() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bm = GenericBm::random(13, 0.5, 0.5, &mut rng);
        let free: Vec<usize> = (0..13).collect();
        let gray = log_sum_exp_neg_energy(&bm, &vec![0.0; 13], &free).unwrap();
        let mut acc = LogSumExp::new();
        for b in 0..1u64 << 13 {
            acc.push(-bm.energy_flat(&decode_state(b, 13)));
        }
        assert!((gray - acc.value()).abs() < 1e-11);
    }

    #[test]
    fn cap_is_enforced() {
        let bm = GenericBm::new(25);
        let free: Vec<usize> = (0..25).collect();
        assert!(matches!(
            log_sum_exp_neg_energy(&bm, &vec![0.0; 25], &free),
            Err(Error::EnumerationCap { .. })
        ));
        assert!(joint_distribution(&bm).is_err());
    }

    #[test]
    fn joint_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bm = GenericBm::random(6, 1.0, 1.0, &mut rng);
        let d = joint_distribution(&bm).unwrap();
        assert_eq!(d.len(), 64);
        assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
}
