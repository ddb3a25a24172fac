//! AIS estimates of log Z for a model small enough to check exactly.

use mfng::eval::{ais_log_z, exact_log_z, AisConfig, BaseRate};
use mfng::DbmModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mfng::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = DbmModel::new(&[10, 6, 4])?;
    model.randomize(0.4, 0.5, &mut rng);
    let data: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..10).map(|_| rng.random_bool(0.3) as u8 as f64).collect())
        .collect();
    let base = BaseRate::from_data(&data, 10)?;

    let exact = exact_log_z(&model)?;
    println!("exact log Z {exact:.4}");
    for n_betas in [100, 1000, 5000] {
        let est = ais_log_z(&model, &base, &AisConfig::linear(100, n_betas, 0))?;
        println!(
            "{n_betas:>5} betas: {:.4} (error {:+.4}, log-weight variance {:.3})",
            est.log_z,
            est.log_z - exact,
            est.log_weight_variance
        );
    }
    Ok(())
}
