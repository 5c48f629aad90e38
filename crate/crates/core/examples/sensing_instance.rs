//! Generate a Gaussian sensing instance and inspect its measurement operator:
//! noise level, restricted spectrum over low-rank directions, operator norm.

use lowrank::sampling::{estimate_restricted_spectrum, generate_instance, NoiseSpec, OperatorSpec};

fn main() -> lowrank::Result<()> {
    let inst = generate_instance(
        30,
        30,
        2,
        &OperatorSpec::gaussian(400),
        &NoiseSpec::Relative { ratio: 0.1 },
        3,
    )?;
    let op = &inst.operator;
    println!(
        "operator: {} with {} measurements",
        op.kind(),
        op.measurements()
    );
    println!(
        "||y|| = {:.4}, ||omega|| = {:.4}",
        inst.y.norm(),
        inst.omega.norm()
    );
    println!(
        "||A*(omega)|| (loss scaled) = {:.4e}",
        inst.noise_adjoint_norm()
    );
    println!("||A||_op^2 = {:.4}", op.op_norm_sq());

    for kappa in [1, 2, 4, 8] {
        let s = estimate_restricted_spectrum(op, kappa, 200, 11)?;
        println!(
            "rank {kappa}: ||A(X)||^2 in [{:.4}, {:.4}] over {} unit directions",
            s.alpha, s.beta, s.trials
        );
    }
    Ok(())
}
