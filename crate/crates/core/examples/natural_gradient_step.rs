//! One update direction from each algorithm, computed with exact phase
//! expectations so it can be compared with the dense natural gradient.

use mfng::eval::{exact_natural_gradient, joint_distribution, posterior_distribution};
use mfng::metric::SampleMatrix;
use mfng::optim::{direction, Algorithm};
use mfng::solver::SolverConfig;
use mfng::DbmModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mfng::Result<()> {
    let mut model = DbmModel::new(&[4, 3, 2])?;
    model.randomize(0.8, 0.5, &mut ChaCha8Rng::seed_from_u64(2));
    let data = vec![
        vec![1.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 1.0],
        vec![1.0, 0.0, 1.0, 0.0],
    ];

    let pos = posterior_distribution(&model, &data)?;
    let neg = joint_distribution(&model)?;
    let pos = SampleMatrix::from_weighted(&model, &pos.states, &pos.weights)?;
    let neg = SampleMatrix::from_weighted(&model, &neg.states, &neg.weights)?;
    let exact = exact_natural_gradient(&model, &data, 0.1)?;

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for alg in Algorithm::ALL {
        let d = direction(alg, &pos, &neg, 0.1, &SolverConfig::default(), None)?;
        let cos = d.delta.iter().zip(&exact).map(|(a, b)| a * b).sum::<f64>() / (norm(&d.delta) * norm(&exact));
        let iters = d.solver.map(|s| s.iterations.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "{alg:<10} |delta| {:>8.4}  cos(delta, exact) {cos:.6}  solver iters {iters}",
            norm(&d.delta)
        );
    }
    Ok(())
}
