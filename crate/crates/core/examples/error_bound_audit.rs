//! Solve a noisy full-observation instance to a critical point and audit the
//! recovery error bound, printing each inequality with its premises.

use lowrank::objective::RegularizedObjective;
use lowrank::sampling::{estimate_restricted_spectrum, generate_instance, NoiseSpec, OperatorSpec};
use lowrank::solvers::{aal_solve, init_spectral, AalConfig, Schedule};
use lowrank::theory::{error_bound_audit, gamma_hat};

fn main() -> lowrank::Result<()> {
    let r_star = 3;
    let inst = generate_instance(
        40,
        40,
        r_star,
        &OperatorSpec::FullObservation,
        &NoiseSpec::Relative { ratio: 0.1 },
        2,
    )?;
    let lambda = 1.2 * inst.noise_adjoint_norm();
    let obj = RegularizedObjective::from_instance(&inst, lambda, r_star)?;
    let config = AalConfig {
        schedule: Schedule::None,
        epsilon: 1e-12,
        max_iters: 100_000,
        ..AalConfig::default()
    };
    let fp = aal_solve(&obj, &config, init_spectral(&obj.loss, r_star)?)?.fp;

    let spectrum = estimate_restricted_spectrum(&inst.operator, 4 * r_star, 1, 0)?;
    let g = gamma_hat(spectrum.alpha, spectrum.beta)?;
    println!(
        "moduli ({}, {}), gamma_hat = {:?}",
        spectrum.alpha, spectrum.beta, g.gamma_hat
    );

    for c in error_bound_audit(&inst, &fp, lambda, &spectrum, None)? {
        println!(
            "{:<20} {:?}  {:.4e} <= {:.4e}",
            c.id, c.verdict, c.lhs, c.rhs
        );
        for p in &c.premises {
            println!("    {} = {} ({})", p.name, p.ok, p.detail);
        }
    }
    Ok(())
}
