//! Recover a low-rank matrix from Gaussian measurements with the accelerated
//! alternating solver, using an over-specified factor rank `r = 3 r*`.

use lowrank::experiment::rmse;
use lowrank::matrix::{numerical_rank, DEFAULT_RANK_TOL};
use lowrank::objective::RegularizedObjective;
use lowrank::sampling::{generate_instance, NoiseSpec, OperatorSpec};
use lowrank::solvers::{aal_solve, init_spectral, AalConfig, LfRule};

fn main() -> lowrank::Result<()> {
    let (r_star, r) = (2, 6);
    let inst = generate_instance(
        30,
        30,
        r_star,
        &OperatorSpec::gaussian(500),
        &NoiseSpec::Relative { ratio: 0.1 },
        1,
    )?;
    let lambda = inst.noise_adjoint_norm();
    let obj = RegularizedObjective::from_instance(&inst, lambda, r)?;
    let config = AalConfig {
        lf: LfRule::Scaled { factor: 0.2 },
        l_ratio: 10.0,
        backtracking: true,
        ..AalConfig::default()
    };
    let out = aal_solve(&obj, &config, init_spectral(&obj.loss, r)?)?;
    let x = out.fp.product();
    println!("lambda      = {lambda:.4e}");
    println!(
        "stop        = {:?} after {} iterations",
        out.stop_reason, out.iterations
    );
    println!(
        "residuals   = ({:.2e}, {:.2e})",
        out.residuals.0, out.residuals.1
    );
    println!("final L_F   = {:.4}", out.lf);
    println!("RMSE        = {:.4}", rmse(&x, &inst.m_star)?);
    println!(
        "output rank = {} (true rank {r_star})",
        numerical_rank(&x, DEFAULT_RANK_TOL)?
    );
    Ok(())
}
