//! Persistent Gibbs chains and mean-field inference against exact marginals.

use mfng::eval::{joint_distribution, posterior_distribution};
use mfng::inference::{mean_field_posterior, sample_negative, ChainPool};
use mfng::{DbmModel, EnergyModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn marginals(states: &[Vec<f64>], weights: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| states.iter().zip(weights).map(|(s, w)| s[i] * w).sum())
        .collect()
}

fn main() -> mfng::Result<()> {
    let mut model = DbmModel::new(&[5, 4, 3])?;
    model.randomize(1.0, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
    let n = model.num_units();

    let exact = joint_distribution(&model)?;
    let p = marginals(&exact.states, &exact.weights, n);

    let mut pool = ChainPool::new(&model, 200, 11)?;
    sample_negative(&model, &mut pool, 50)?;
    let mut sums = vec![0.0; n];
    let rounds = 500;
    for _ in 0..rounds {
        sample_negative(&model, &mut pool, 1)?;
        for s in pool.states() {
            for (acc, v) in sums.iter_mut().zip(s.as_flat()) {
                *acc += v;
            }
        }
    }
    println!("unit  exact   gibbs");
    for i in 0..n {
        println!("{i:>4}  {:.4}  {:.4}", p[i], sums[i] / (rounds * pool.len()) as f64);
    }

    let v = vec![vec![1.0, 0.0, 1.0, 1.0, 0.0]];
    let post = posterior_distribution(&model, &v)?;
    let q = marginals(&post.states, &post.weights, n);
    let mf = mean_field_posterior(&model, &v, 30)?;
    println!("\nhidden posterior given {:?}", v[0]);
    for i in model.num_visible()..n {
        println!("{i:>4}  exact {:.4}  mean-field {:.4}", q[i], mf[0].as_flat()[i]);
    }
    Ok(())
}
