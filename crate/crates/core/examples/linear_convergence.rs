//! Unaccelerated solver on a full-observation instance: distance to the final
//! iterate per iteration and the fitted linear rate.

use lowrank::experiment::{run_convergence, ExperimentConfig, ExperimentKind};

fn main() -> lowrank::Result<()> {
    let config = ExperimentConfig {
        n: 60,
        m: 60,
        r_star: 4,
        lambda: lowrank::experiment::LambdaRule::FractionOfSigma { c: 0.95, index: 4 },
        ..ExperimentConfig::desk(ExperimentKind::Convergence)
    };
    let res = run_convergence(&config)?;
    for rec in res.trace.records.iter().step_by(25) {
        println!(
            "iter {:>4}: obj {:.8e}, dist {:.3e}",
            rec.iter, rec.obj, rec.dist_to_final
        );
    }
    let fit = &res.fit;
    println!(
        "rate {:.5} per iteration, R^2 {:.5} over {} points ({:?} after {} iterations)",
        fit.rate, fit.fit.r_squared, fit.fit.points, res.stop_reason, res.iterations
    );
    Ok(())
}
