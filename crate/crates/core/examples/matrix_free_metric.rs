//! The Fisher metric as a matrix-free operator on chain samples.

use mfng::inference::{sample_negative, ChainPool};
use mfng::metric::{apply_metric, build_sample_matrix, dense_metric, metric_diagonal, MetricOperator};
use mfng::{DbmModel, EnergyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mfng::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = DbmModel::new(&[12, 8, 4])?;
    model.randomize(0.3, 0.3, &mut rng);

    let mut pool = ChainPool::new(&model, 64, 2)?;
    sample_negative(&model, &mut pool, 20)?;
    let samples = build_sample_matrix(&model, pool.states())?;
    let op = MetricOperator::new(&samples, 0.1)?;
    println!("M = {} samples, N = {} parameters", op.num_samples(), op.num_params());

    let y: Vec<f64> = (0..model.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fast = apply_metric(&op, &y)?;
    let dense = dense_metric(&op)?;
    let slow = &dense * nalgebra::DVector::from_column_slice(&y);
    let gap = fast
        .iter()
        .zip(slow.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max |L y (matrix-free) - L y (dense)| = {gap:.2e}");

    let d = metric_diagonal(&op);
    let (lo, hi) = d.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("diagonal range [{lo:.4}, {hi:.4}]");
    Ok(())
}
