//! Objective gap and squared gradient along the repeated-value sequence that
//! approaches a non-global critical point, with log-log slopes.

use lowrank::theory::counterexample_sequence;

fn main() -> lowrank::Result<()> {
    let rep = counterexample_sequence(2.0, 1.0, 200)?;
    println!(
        "Phi at the base point: {:.6} (closed form {:.6})",
        rep.base_value, rep.base_value_formula
    );
    for p in rep
        .points
        .iter()
        .filter(|p| [1, 5, 10, 50, 100, 200].contains(&p.k))
    {
        println!(
            "k = {:>3}: gap {:.3e}, grad^2 {:.3e}, ratio {:.4}",
            p.k, p.gap, p.grad_sq, p.ratio
        );
    }
    println!(
        "gap slope    {:.4} (R^2 {:.6})",
        rep.gap_fit.slope, rep.gap_fit.r_squared
    );
    println!(
        "grad^2 slope {:.4} (R^2 {:.6})",
        rep.grad_fit.slope, rep.grad_fit.r_squared
    );
    for c in &rep.checks {
        println!("{:<34} {:?}", c.id, c.verdict);
    }
    Ok(())
}
