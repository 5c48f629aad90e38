//! Small lambda sweep comparing the factored and convex solvers; prints the
//! sweep CSV. Set LOWRANK_THREADS to control parallelism.

use lowrank::experiment::{init_thread_pool, run_rmse_sweep, ExperimentConfig, ExperimentKind};
use lowrank::sampling::OperatorSpec;

fn main() -> lowrank::Result<()> {
    init_thread_pool()?;
    let config = ExperimentConfig {
        n: 25,
        m: 25,
        r_star: 2,
        operator: OperatorSpec::gaussian(300),
        nu_grid: vec![0.5, 1.0, 2.0],
        trials: 2,
        ..ExperimentConfig::desk(ExperimentKind::RmseSweep)
    };
    let res = run_rmse_sweep(&config)?;
    print!("{}", res.to_csv());
    Ok(())
}
