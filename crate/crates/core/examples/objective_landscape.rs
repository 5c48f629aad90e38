//! Factored objective at two points: a random start and the solver output.
//! Reports value, gradient norm and the smallest Hessian eigenvalue.

use lowrank::matrix::FactorPair;
use lowrank::objective::RegularizedObjective;
use lowrank::sampling::{generate_instance, NoiseSpec, OperatorSpec};
use lowrank::solvers::{aal_solve, init_spectral, AalConfig, Schedule};

fn describe(label: &str, obj: &RegularizedObjective, fp: &FactorPair) {
    let probe = obj.min_eig_hessian(fp, 1e-9);
    println!(
        "{label:>8}: Phi = {:.6}, ||grad|| = {:.2e}, min Hessian eig = {:.3e} ({})",
        obj.value(fp),
        obj.gradient_norm(fp),
        probe.value,
        if probe.is_psd() { "PSD" } else { "indefinite" }
    );
}

fn main() -> lowrank::Result<()> {
    let inst = generate_instance(
        20,
        20,
        2,
        &OperatorSpec::FullObservation,
        &NoiseSpec::Relative { ratio: 0.1 },
        5,
    )?;
    let lambda = 1.2 * inst.noise_adjoint_norm();
    let obj = RegularizedObjective::from_instance(&inst, lambda, 2)?;
    let start = init_spectral(&obj.loss, 2)?;
    describe("start", &obj, &start.scaled(0.5));

    let config = AalConfig {
        schedule: Schedule::None,
        epsilon: 1e-10,
        max_iters: 20_000,
        ..AalConfig::default()
    };
    let out = aal_solve(&obj, &config, start)?;
    describe("solution", &obj, &out.fp);
    Ok(())
}
