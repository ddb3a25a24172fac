//! Centered energies, their uncentered equivalent, and exact log Z.

use mfng::eval::{exact_log_z, exact_loglik};
use mfng::{DbmModel, EnergyModel, JointState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mfng::Result<()> {
    let sizes = [4, 3, 2];
    let data = vec![
        vec![1.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 1.0],
        vec![1.0, 0.0, 1.0, 0.0],
    ];
    let mean: Vec<f64> = (0..4).map(|i| data.iter().map(|r| r[i]).sum::<f64>() / 3.0).collect();

    let mut model = DbmModel::with_data_offsets(&sizes, &mean)?;
    model.randomize(0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
    println!("offsets {:?}", model.offsets());

    let (plain, shift) = model.uncenter();
    let x = JointState::from_layers(&[vec![1.0, 0.0, 1.0, 1.0], vec![0.0, 1.0, 1.0], vec![1.0, 0.0]]);
    println!("E_centered(x)   = {:.6}", model.energy(&x)?);
    println!("E_uncentered(x) = {:.6} (+ {shift:.6})", plain.energy(&x)?);

    // the shift cancels in log p, so both parameterisations describe one distribution
    println!(
        "log Z centered {:.6}, uncentered {:.6}",
        exact_log_z(&model)?,
        exact_log_z(&plain)?
    );
    println!(
        "mean log-likelihood {:.6} / {:.6}",
        exact_loglik(&model, &data)?,
        exact_loglik(&plain, &data)?
    );
    println!("{} parameters over {} units", model.num_params(), model.num_units());
    Ok(())
}
