use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lowrank::experiment::{self, ExperimentConfig, ExperimentKind};
use lowrank::matrix::save_matrix;
use lowrank::objective::{LeastSquaresLoss, RegularizedObjective};
use lowrank::sampling::{generate_instance, RecoveryInstance};
use lowrank::solvers::{aal_solve, apg_nuclear, init_spectral};
use lowrank::{Error, Result};
use serde_json::json;

/// Regularized low-rank factorization: solvers, experiments and audits.
///
/// Worker threads are taken from LOWRANK_THREADS (default: all cores).
#[derive(Parser)]
#[command(name = "lowrank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; missing fields take the desk defaults for the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to the config's output_dir, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    /// Instance directory written by `gen`; generated from the config when absent.
    #[arg(long)]
    instance: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a recovery instance and write it to the output directory.
    Gen(Common),
    /// Solve the factored problem with the accelerated alternating solver.
    SolveAal(SolveArgs),
    /// Solve the nuclear-norm problem with the proximal-gradient baseline.
    SolveApg(SolveArgs),
    /// Lambda sweep comparing RMSE and output rank of both solvers.
    Sweep(Common),
    /// Linear-convergence run with distance-to-final trace and fit.
    Convergence(Common),
    /// Run every theory audit and write a JSON report.
    Verify(Common),
    /// Gap and gradient sequence of the KL counterexample.
    Counterexample(Common),
}

fn load_config(common: &Common, kind: ExperimentKind) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            // start from the subcommand's desk defaults, then apply the document
            let mut base = serde_json::to_value(ExperimentConfig::desk(kind))?;
            let doc: serde_json::Value = serde_json::from_str(&text)?;
            if let (Some(b), Some(d)) = (base.as_object_mut(), doc.as_object()) {
                for (k, v) in d {
                    b.insert(k.clone(), v.clone());
                }
            }
            serde_json::from_value(base)?
        }
        None => ExperimentConfig::desk(kind),
    };
    cfg.kind = kind;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn instance_for(args: &SolveArgs, cfg: &ExperimentConfig) -> Result<RecoveryInstance> {
    match &args.instance {
        Some(dir) => RecoveryInstance::load(dir),
        None => generate_instance(
            cfg.n,
            cfg.m,
            cfg.r_star,
            &cfg.operator,
            &cfg.noise,
            cfg.seed,
        ),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))
        .map_err(|e| Error::io(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let (cfg, out) = load_config(&c, ExperimentKind::RmseSweep)?;
            let inst = generate_instance(
                cfg.n,
                cfg.m,
                cfg.r_star,
                &cfg.operator,
                &cfg.noise,
                cfg.seed,
            )?;
            inst.save(&out)?;
            println!("instance written to {}", out.display());
        }
        Command::SolveAal(a) => {
            let (cfg, out) = load_config(&a.common, ExperimentKind::RmseSweep)?;
            let inst = instance_for(&a, &cfg)?;
            let lambda = cfg.lambda.resolve(&inst)?;
            let r = cfg.factor_rank();
            let obj = RegularizedObjective::from_instance(&inst, lambda, r)?;
            let res = aal_solve(&obj, &cfg.aal, init_spectral(&obj.loss, r)?)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            save_matrix(&out.join("u.txt"), &res.fp.u)?;
            save_matrix(&out.join("v.txt"), &res.fp.v)?;
            if cfg.aal.record_trace {
                write(
                    &out.join("trace.csv"),
                    &experiment::trace_csv(&res.trace, &cfg.hash()),
                )?;
            }
            let x = res.fp.product();
            let summary = json!({
                "version": lowrank::VERSION,
                "config_hash": cfg.hash(),
                "lambda": lambda,
                "r": r,
                "objective": obj.value(&res.fp),
                "iterations": res.iterations,
                "stop_reason": res.stop_reason,
                "residuals": [res.residuals.0, res.residuals.1],
                "lf": res.lf,
                "rmse": experiment::rmse(&x, &inst.m_star)?,
                "rank": lowrank::matrix::numerical_rank(&x, lowrank::matrix::DEFAULT_RANK_TOL)?,
            });
            write(
                &out.join("aal.json"),
                &serde_json::to_string_pretty(&summary)?,
            )?;
            println!("{summary}");
        }
        Command::SolveApg(a) => {
            let (cfg, out) = load_config(&a.common, ExperimentKind::RmseSweep)?;
            let inst = instance_for(&a, &cfg)?;
            let lambda = cfg.lambda.resolve(&inst)?;
            let loss = LeastSquaresLoss::from_instance(&inst);
            let res = apg_nuclear(&loss, lambda, &cfg.apg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            save_matrix(&out.join("x.txt"), &res.x)?;
            let summary = json!({
                "version": lowrank::VERSION,
                "config_hash": cfg.hash(),
                "lambda": lambda,
                "objective": res.objective,
                "iterations": res.iterations,
                "stop_reason": res.stop_reason,
                "rmse": experiment::rmse(&res.x, &inst.m_star)?,
                "rank": lowrank::matrix::numerical_rank(&res.x, lowrank::matrix::DEFAULT_RANK_TOL)?,
            });
            write(
                &out.join("apg.json"),
                &serde_json::to_string_pretty(&summary)?,
            )?;
            println!("{summary}");
        }
        Command::Sweep(c) => emit(&c, ExperimentKind::RmseSweep)?,
        Command::Convergence(c) => emit(&c, ExperimentKind::Convergence)?,
        Command::Verify(c) => emit(&c, ExperimentKind::Verify)?,
        Command::Counterexample(c) => emit(&c, ExperimentKind::Counterexample)?,
    }
    Ok(())
}

fn emit(c: &Common, kind: ExperimentKind) -> Result<()> {
    let (cfg, out) = load_config(c, kind)?;
    for path in experiment::run_and_emit(&cfg, &out)?.files {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = experiment::init_thread_pool() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
