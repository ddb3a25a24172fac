//! Ground truth by exhaustive enumeration: partition function, likelihood,
//! the Fisher metric in three algebraically equivalent forms, and the exact
//! damped natural gradient.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::enumerate::{check_cap, joint_distribution, log_sum_exp_neg_energy, posterior_distribution, WeightedStates};
use crate::error::{check_len, Result};
use crate::model::EnergyModel;

/// Step used by the finite-difference Hessian of `log Z`.
pub const HESSIAN_STEP: f64 = 1e-4;

pub fn exact_log_z<M: EnergyModel>(model: &M) -> Result<f64> {
    let n = model.num_units();
    check_cap(n)?;
    let free: Vec<usize> = (0..n).collect();
    log_sum_exp_neg_energy(model, &vec![0.0; n], &free)
}

/// `log sum_h exp(-E(v, h))`, marginalising every hidden unit.
pub fn exact_log_marginal<M: EnergyModel>(model: &M, visible: &[f64]) -> Result<f64> {
    let n = model.num_units();
    let nv = model.num_visible();
    check_len("visible vector", nv, visible.len())?;
    let mut base = visible.to_vec();
    base.resize(n, 0.0);
    let free: Vec<usize> = (nv..n).collect();
    log_sum_exp_neg_energy(model, &base, &free)
}

/// Mean of `log p(v)` over the rows of `data`.
pub fn exact_loglik<M: EnergyModel>(model: &M, data: &[Vec<f64>]) -> Result<f64> {
    if data.is_empty() {
        return Err(crate::Error::InvalidArgument("empty dataset".into()));
    }
    let log_z = exact_log_z(model)?;
    exact_loglik_given_log_z(model, data, log_z)
}

/// Mean of `log p(v)` using a precomputed (or estimated) `log Z`.
pub fn exact_loglik_given_log_z<M: EnergyModel>(model: &M, data: &[Vec<f64>], log_z: f64) -> Result<f64> {
    // rows repeat a lot in binary data; each distinct row is summed once
    let mut distinct: std::collections::BTreeMap<Vec<u8>, (usize, &Vec<f64>)> = Default::default();
    for row in data {
        let key: Vec<u8> = row.iter().map(|&v| (v != 0.0) as u8).collect();
        distinct.entry(key).or_insert((0, row)).0 += 1;
    }
    let entries: Vec<(usize, &Vec<f64>)> = distinct.into_values().collect();
    let parts: Vec<f64> = entries
        .par_iter()
        .map(|&(count, row)| exact_log_marginal(model, row).map(|m| count as f64 * (m - log_z)))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum::<f64>() / data.len() as f64)
}

/// Weighted mean of the energy gradient over `states`.
pub fn expected_energy_grad<M: EnergyModel>(model: &M, states: &WeightedStates) -> Vec<f64> {
    let n = model.num_params();
    let mut mean = vec![0.0; n];
    let mut s = vec![0.0; n];
    for (x, &w) in states.states.iter().zip(&states.weights) {
        model.energy_grad_flat(x, &mut s);
        for (m, v) in mean.iter_mut().zip(&s) {
            *m += w * v;
        }
    }
    mean
}

/// Gradient of the mean negative log-likelihood, `E_data[dE] - E_model[dE]`.
pub fn exact_nll_gradient<M: EnergyModel>(model: &M, data: &[Vec<f64>]) -> Result<Vec<f64>> {
    let pos = posterior_distribution(model, data)?;
    let neg = joint_distribution(model)?;
    let a = expected_energy_grad(model, &pos);
    let b = expected_energy_grad(model, &neg);
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FimForm {
    /// `Cov_p[dE]`, computed as `E[dE dE^T] - E[dE] E[dE]^T`.
    Covariance,
    /// Central finite differences of `log Z`.
    HessianLogZ,
    /// `E_p[d log p  d log p^T]` with `d log p = -dE + E_p[dE]`.
    ScoreOuter,
}

/// Exact Fisher information of the joint distribution.
pub fn exact_fim<M: EnergyModel>(model: &M, form: FimForm) -> Result<DMatrix<f64>> {
    check_cap(model.num_units())?;
    match form {
        FimForm::Covariance => {
            let dist = joint_distribution(model)?;
            let n = model.num_params();
            let mut second = DMatrix::<f64>::zeros(n, n);
            let mut mean = DVector::<f64>::zeros(n);
            let mut s = vec![0.0; n];
            for (x, &w) in dist.states.iter().zip(&dist.weights) {
                model.energy_grad_flat(x, &mut s);
                let sv = DVector::from_column_slice(&s);
                second.syger(w, &sv, &sv, 1.0);
                mean.axpy(w, &sv, 1.0);
            }
            second.syger(-1.0, &mean, &mean, 1.0);
            second.fill_upper_triangle_with_lower_triangle();
            Ok(second)
        }
        FimForm::ScoreOuter => {
            let dist = joint_distribution(model)?;
            let mean = DVector::from_vec(expected_energy_grad(model, &dist));
            let n = model.num_params();
            let mut fim = DMatrix::<f64>::zeros(n, n);
            let mut s = vec![0.0; n];
            for (x, &w) in dist.states.iter().zip(&dist.weights) {
                model.energy_grad_flat(x, &mut s);
                let score = &mean - DVector::from_column_slice(&s);
                fim.ger(w, &score, &score, 1.0);
            }
            Ok(fim)
        }
        FimForm::HessianLogZ => hessian_log_z(model, HESSIAN_STEP),
    }
}

fn hessian_log_z<M: EnergyModel>(model: &M, h: f64) -> Result<DMatrix<f64>> {
    let theta = model.params().to_vec();
    let n = theta.len();
    let log_z_at = |i: usize, si: f64, j: usize, sj: f64| -> Result<f64> {
        let mut p = theta.clone();
        p[i] += si;
        p[j] += sj;
        exact_log_z(&model.with_params(&p))
    };
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let entries: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let pp = log_z_at(i, h, j, h)?;
            let pm = log_z_at(i, h, j, -h)?;
            let mp = log_z_at(i, -h, j, h)?;
            let mm = log_z_at(i, -h, j, -h)?;
            Ok((pp - pm - mp + mm) / (4.0 * h * h))
        })
        .collect::<Result<_>>()?;
    let mut out = DMatrix::<f64>::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(entries) {
        out[(i, j)] = v;
        out[(j, i)] = v;
    }
    Ok(out)
}

/// Solves `(fim + alpha I) x = g` densely. Singular systems get the
/// minimum-norm (pseudo-inverse) solution.
pub fn damped_solve(fim: &DMatrix<f64>, g: &[f64], alpha: f64) -> Vec<f64> {
    let n = fim.nrows();
    let a = fim + DMatrix::<f64>::identity(n, n) * alpha;
    let b = DVector::from_column_slice(g);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (smax * 1e-12).max(f64::MIN_POSITIVE);
    svd.solve(&b, eps)
        .expect("both singular vector sets were computed")
        .as_slice()
        .to_vec()
}

/// `(F + alpha I)^+ g` with `F` the exact covariance-form Fisher metric and
/// `g` the exact negative log-likelihood gradient.
pub fn exact_natural_gradient<M: EnergyModel>(model: &M, data: &[Vec<f64>], alpha: f64) -> Result<Vec<f64>> {
    let fim = exact_fim(model, FimForm::Covariance)?;
    let g = exact_nll_gradient(model, data)?;
    Ok(damped_solve(&fim, &g, alpha))
}

#[derive(Clone, Debug)]
pub struct ExactSummary {
    pub log_z: f64,
    pub loglik: f64,
    pub fim: DMatrix<f64>,
}

pub fn exact_summary<M: EnergyModel>(model: &M, data: &[Vec<f64>]) -> Result<ExactSummary> {
    let log_z = exact_log_z(model)?;
    Ok(ExactSummary {
        log_z,
        loglik: exact_loglik_given_log_z(model, data, log_z)?,
        fim: exact_fim(model, FimForm::Covariance)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::enumerate::decode_state;
    use crate::model::{DbmModel, GenericBm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dbm(sizes: &[usize], w: f64, rng: &mut ChaCha8Rng) -> DbmModel {
        let total: usize = sizes.iter().sum();
        let offsets = (0..total).map(|_| rng.random::<f64>()).collect();
        let mut m = DbmModel::with_offsets(sizes, offsets).unwrap();
        m.randomize(w, 1.0, rng);
        m
    }

    #[test]
    fn zero_model_log_z_is_n_log_2() {
        let m = DbmModel::new(&[3, 4]).unwrap();
        assert!((exact_log_z(&m).unwrap() - 7.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_unit_log_z_closed_form() {
        let mut m = DbmModel::new(&[1]).unwrap();
        m.bias_mut(0)[0] = 1.7;
        assert!((exact_log_z(&m).unwrap() - (1.0 + 1.7f64.exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn log_z_independent_of_enumeration_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bm = GenericBm::random(10, 1.0, 1.0, &mut rng);
        // reverse lexicographic order, plain summation with a fixed shift
        let neg_e: Vec<f64> = (0..1u64 << 10)
            .rev()
            .map(|b| -bm.energy_flat(&decode_state(b, 10)))
            .collect();
        let max = neg_e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let direct = max + neg_e.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        assert!((exact_log_z(&bm).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_model_loglik_is_uniform() {
        let m = DbmModel::new(&[4, 3]).unwrap();
        let data = vec![vec![1.0, 0.0, 1.0, 1.0], vec![0.0; 4]];
        let ll = exact_loglik(&m, &data).unwrap();
        assert!((ll + 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fully_visible_loglik_is_negative_energy_minus_log_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bm = GenericBm::random(5, 1.0, 1.0, &mut rng);
        let v = vec![1.0, 0.0, 0.0, 1.0, 1.0];
        let ll = exact_loglik(&bm, std::slice::from_ref(&v)).unwrap();
        let want = -bm.energy_flat(&v) - exact_log_z(&bm).unwrap();
        assert!((ll - want).abs() < 1e-12);
    }

    #[test]
    fn loglik_matches_joint_enumeration_marginalisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_dbm(&[6, 4, 2], 1.0, &mut rng);
        let data: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| f64::from(rng.random::<bool>() as u8)).collect())
            .collect();
        let joint = joint_distribution(&m).unwrap();
        let mut want = 0.0;
        for v in &data {
            let p: f64 = joint
                .states
                .iter()
                .zip(&joint.weights)
                .filter(|(x, _)| &x[..6] == v.as_slice())
                .map(|(_, w)| w)
                .sum();
            want += p.ln();
        }
        want /= data.len() as f64;
        let got = exact_loglik(&m, &data).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!(got <= 0.0);
    }

    #[test]
    fn fim_single_unit_bias_variance() {
        let m = DbmModel::new(&[1]).unwrap();
        for form in [FimForm::Covariance, FimForm::ScoreOuter, FimForm::HessianLogZ] {
            let f = exact_fim(&m, form).unwrap();
            assert!((f[(0, 0)] - 0.25).abs() < 1e-8, "{form:?}");
        }
    }

    #[test]
    fn fim_forms_agree_on_random_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bm = GenericBm::random(5, 1.0, 1.0, &mut rng);
        let cov = exact_fim(&bm, FimForm::Covariance).unwrap();
        let score = exact_fim(&bm, FimForm::ScoreOuter).unwrap();
        let hess = exact_fim(&bm, FimForm::HessianLogZ).unwrap();
        assert!((&cov - &score).amax() < 1e-10);
        assert!((&cov - &hess).amax() < 1e-5);
    }

    #[test]
    fn fim_weight_entry_is_fourth_moment_minus_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bm = GenericBm::random(5, 1.0, 1.0, &mut rng);
        let cov = exact_fim(&bm, FimForm::Covariance).unwrap();
        let d = joint_distribution(&bm).unwrap();
        let e = |f: &dyn Fn(&[f64]) -> f64| -> f64 { d.states.iter().zip(&d.weights).map(|(x, w)| w * f(x)).sum() };
        for (k, l, m, n) in [(0, 1, 2, 3), (0, 1, 0, 1), (1, 4, 2, 4)] {
            let want = e(&|x| x[k] * x[l] * x[m] * x[n]) - e(&|x| x[k] * x[l]) * e(&|x| x[m] * x[n]);
            let got = cov[(bm.pair_index(k, l), bm.pair_index(m, n))];
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fim_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_dbm(&[3, 3, 2], 1.0, &mut rng);
        let f = exact_fim(&m, FimForm::Covariance).unwrap();
        let eig = f.symmetric_eigenvalues();
        assert!(eig.min() >= -1e-10);
    }

    #[test]
    fn centered_and_uncentered_models_define_the_same_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for sizes in [&[2usize, 2, 2][..], &[6, 6, 4], &[8, 8]] {
            let m = random_dbm(sizes, 1.0, &mut rng);
            let (u, _) = m.uncenter();
            let a = joint_distribution(&m).unwrap();
            let b = joint_distribution(&u).unwrap();
            let diff = a
                .weights
                .iter()
                .zip(&b.weights)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "{sizes:?}: {diff}");
        }
    }

    #[test]
    fn natural_gradient_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bm = GenericBm::random(4, 0.5, 0.5, &mut rng);
        let data = vec![vec![1.0, 0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0, 0.0]];
        let g = exact_nll_gradient(&bm, &data).unwrap();
        let alpha = 1e8;
        let x = exact_natural_gradient(&bm, &data, alpha).unwrap();
        for (xi, gi) in x.iter().zip(&g) {
            assert!((alpha * xi - gi).abs() < 1e-6);
        }

        let eye = DMatrix::<f64>::identity(3, 3);
        let x = damped_solve(&eye, &[1.0, -2.0, 0.5], 0.1);
        for (xi, gi) in x.iter().zip([1.0, -2.0, 0.5]) {
            assert!((xi - gi / 1.1).abs() < 1e-12);
        }
    }

    #[test]
    fn damped_solve_returns_minimum_norm_on_singular_systems() {
        let c = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let a = &c * c.transpose();
        let g = (&c * c.dot(&c)).as_slice().to_vec();
        let x = damped_solve(&a, &g, 0.0);
        for (xi, ci) in x.iter().zip(c.iter()) {
            assert!((xi - ci).abs() < 1e-10);
        }
    }

    #[test]
    fn nll_gradient_matches_loglik_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = random_dbm(&[3, 2, 1], 1.0, &mut rng);
        let data = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]];
        let g = exact_nll_gradient(&m, &data).unwrap();
        let theta = m.params().to_vec();
        let h = 1e-5;
        for j in 0..theta.len() {
            let mut p = theta.clone();
            p[j] += h;
            let up = exact_loglik(&m.with_params(&p), &data).unwrap();
            p[j] -= 2.0 * h;
            let dn = exact_loglik(&m.with_params(&p), &data).unwrap();
            let fd = -(up - dn) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6, "param {j}: {fd} vs {}", g[j]);
        }
    }
}
