//! Nuclear-norm baseline: proximal gradient with singular value thresholding
//! on the same kind of instance the factored solver handles.

use lowrank::experiment::rmse;
use lowrank::matrix::{numerical_rank, DEFAULT_RANK_TOL};
use lowrank::objective::LeastSquaresLoss;
use lowrank::sampling::{generate_instance, NoiseSpec, OperatorSpec};
use lowrank::solvers::{apg_nuclear, convex_objective, ApgConfig};

fn main() -> lowrank::Result<()> {
    let inst = generate_instance(
        30,
        30,
        2,
        &OperatorSpec::gaussian(500),
        &NoiseSpec::Relative { ratio: 0.1 },
        1,
    )?;
    let loss = LeastSquaresLoss::from_instance(&inst);
    for nu in [0.5, 1.0, 2.0] {
        let lambda = nu * inst.noise_adjoint_norm();
        let out = apg_nuclear(&loss, lambda, &ApgConfig::default())?;
        println!(
            "nu = {nu}: {} iterations, objective {:.6}, RMSE {:.4}, rank {}",
            out.iterations,
            convex_objective(&loss, lambda, &out.x)?,
            rmse(&out.x, &inst.m_star)?,
            numerical_rank(&out.x, DEFAULT_RANK_TOL)?
        );
    }
    Ok(())
}
