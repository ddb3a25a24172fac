//! MINRES and CG on a damped metric system, with and without Jacobi scaling.

use mfng::inference::{sample_negative, ChainPool};
use mfng::metric::{build_sample_matrix, MetricOperator};
use mfng::solver::{solve, Preconditioner, PreconditionerKind, SolverConfig, SolverMethod};
use mfng::{DbmModel, EnergyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mfng::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = DbmModel::new(&[20, 10, 5])?;
    model.randomize(0.5, 1.0, &mut rng);
    let mut pool = ChainPool::new(&model, 100, 6)?;
    sample_negative(&model, &mut pool, 25)?;
    let op = MetricOperator::new(&build_sample_matrix(&model, pool.states())?, 0.01)?;
    let g: Vec<f64> = (0..model.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x0 = vec![0.0; g.len()];

    println!("method  precond  iters  residual   termination");
    for method in [SolverMethod::Minres, SolverMethod::Cg] {
        for kind in [PreconditionerKind::None, PreconditionerKind::Jacobi] {
            let config = SolverConfig {
                method,
                preconditioner: kind,
                tolerance: 1e-8,
                max_iterations: 500,
                ..Default::default()
            };
            let precond = match kind {
                PreconditionerKind::None => Preconditioner::None,
                PreconditionerKind::Jacobi => Preconditioner::Jacobi(op.diagonal()),
            };
            let r = solve(&op, &g, &x0, &config, &precond)?;
            println!(
                "{:<7} {:<8} {:>5}  {:.2e}  {:?}",
                format!("{method:?}"),
                format!("{kind:?}"),
                r.iterations,
                r.final_relative_residual,
                r.termination
            );
        }
    }
    Ok(())
}
