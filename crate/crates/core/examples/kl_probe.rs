//! Sample the KL ratio ||grad Phi||^2 / (Phi - Phi*) on a ball around the global
//! minimizer of a diagonal objective, once for each gap class of lambda.

use lowrank::experiment::{kl_sigma, KL_LAMBDAS};
use lowrank::objective::DiagonalObjective;
use lowrank::theory::{gap_class, global_set_fullobs, kl_probe, kl_radius, KlProbeConfig};

fn main() -> lowrank::Result<()> {
    for (k, lambda) in KL_LAMBDAS {
        let diag = DiagonalObjective::new(30, 30, kl_sigma(), lambda, 6)?;
        let (center, optimum) = global_set_fullobs(&diag)?;
        let probe = kl_probe(&diag, &center, &KlProbeConfig::default())?;
        println!(
            "lambda = {lambda:>4}: class {:?}, radius {:.4}, Phi* = {optimum:.4}, eta_hat = {:.4} over {} samples",
            gap_class(&diag),
            kl_radius(&diag, k),
            probe.eta_hat,
            probe.positive_samples
        );
    }
    Ok(())
}
