//! Experiment harness: the lambda sweep comparing the factored solver with the
//! convex baseline, linear-convergence runs, theory verification runs and
//! the counterexample sequence, plus CSV/JSON persistence.
//!
//! Every artifact carries the code version and a SHA-256 hash of the
//! configuration that produced it. CSV files start with `#` metadata lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::matrix::{fmt17, numerical_rank, singular_values, Matrix, DEFAULT_RANK_TOL};
use crate::objective::{DiagonalObjective, LeastSquaresLoss, RegularizedObjective};
use crate::sampling::{
    estimate_restricted_spectrum, generate_instance, NoiseSpec, OperatorSpec, RecoveryInstance,
    SpectrumEstimate,
};
use crate::solvers::{
    aal_solve, apg_nuclear, init_spectral, AalConfig, ApgConfig, LfRule, Schedule, SolverTrace,
    StopReason, TraceRecord,
};
use crate::theory::{
    self, Check, CounterexampleReport, KlProbeConfig, LineFit, TheoryReport, Verdict,
};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "LOWRANK_THREADS";

/// Builds the global rayon pool from `LOWRANK_THREADS` when set. Returns the
/// thread count in effect.
pub fn init_thread_pool() -> Result<usize> {
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let threads: usize = raw.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("{THREADS_ENV}={raw:?} is not a thread count"))
        })?;
        // a second initialization in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    Ok(rayon::current_num_threads())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    RmseSweep,
    Convergence,
    Verify,
    Counterexample,
}

/// How `lambda` is derived from an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum LambdaRule {
    Absolute {
        lambda: f64,
    },
    /// `nu * ||grad f(M*)||`, i.e. `nu * ||A*(omega)||` in the loss scaling.
    NuTimesNoise {
        nu: f64,
    },
    /// `c * sigma_index(A*(y))`, 1-based; for full observation `A*(y)` is the observed matrix.
    FractionOfSigma {
        c: f64,
        index: usize,
    },
}

impl LambdaRule {
    pub fn resolve(&self, inst: &RecoveryInstance) -> Result<f64> {
        let lambda = match self {
            LambdaRule::Absolute { lambda } => *lambda,
            LambdaRule::NuTimesNoise { nu } => nu * inst.noise_adjoint_norm(),
            LambdaRule::FractionOfSigma { c, index } => {
                let sv = singular_values(&inst.operator.adjoint(&inst.y))?;
                if *index == 0 || *index > sv.len() {
                    return Err(Error::InvalidArgument(format!(
                        "sigma index {index} out of range"
                    )));
                }
                c * sv[index - 1]
            }
        };
        if lambda > 0.0 && lambda.is_finite() {
            Ok(lambda)
        } else {
            Err(Error::InvalidArgument(format!(
                "lambda rule {self:?} gives {lambda}; a noiseless instance needs an absolute lambda"
            )))
        }
    }
}

/// Settings used only by verification runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySettings {
    /// Caller-asserted restricted moduli `[alpha, beta]` replacing the computed ones.
    pub spectrum_override: Option<[f64; 2]>,
    pub kl_samples: usize,
    /// Gaussian sensing instance for the convex/factored comparison.
    pub equivalence_n: usize,
    pub equivalence_m: usize,
    pub equivalence_p: usize,
    pub equivalence_r_star: usize,
    pub equivalence_nu: f64,
    pub equivalence_tolerance: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            spectrum_override: None,
            kl_samples: 200,
            equivalence_n: 40,
            equivalence_m: 40,
            equivalence_p: 2000,
            equivalence_r_star: 2,
            equivalence_nu: 2.0,
            equivalence_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterexampleSettings {
    pub a: f64,
    pub lambda: f64,
    pub k_max: usize,
}

impl Default for CounterexampleSettings {
    fn default() -> Self {
        Self {
            a: 2.0,
            lambda: 1.0,
            k_max: 200,
        }
    }
}

/// One JSON document per run. Missing fields take the rmse-sweep desk defaults;
/// use [`ExperimentConfig::desk`] for the other kinds' defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub n: usize,
    pub m: usize,
    pub r_star: usize,
    /// Factor rank; defaults to `3 r*` for sweeps and `r*` otherwise.
    pub r: Option<usize>,
    pub operator: OperatorSpec,
    pub noise: NoiseSpec,
    pub lambda: LambdaRule,
    /// Sweep grid; each value replaces `nu` in a `nu-times-noise` rule.
    pub nu_grid: Vec<f64>,
    pub aal: AalConfig,
    pub apg: ApgConfig,
    pub trials: usize,
    pub seed: u64,
    /// Not part of the config hash.
    pub output_dir: Option<PathBuf>,
    pub verify: VerifySettings,
    pub counterexample: CounterexampleSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk(ExperimentKind::RmseSweep)
    }
}

pub const DEFAULT_NU_GRID: [f64; 8] = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

/// Coarse grid for the qualitative solver comparison (RMSE parity, rank ordering).
pub const COMPARISON_NU_GRID: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

impl ExperimentConfig {
    /// Desk-scale defaults for each kind.
    pub fn desk(kind: ExperimentKind) -> Self {
        let base = Self {
            kind,
            n: 60,
            m: 60,
            r_star: 3,
            r: None,
            operator: OperatorSpec::gaussian(900),
            noise: NoiseSpec::Relative { ratio: 0.1 },
            lambda: LambdaRule::NuTimesNoise { nu: 1.0 },
            nu_grid: DEFAULT_NU_GRID.to_vec(),
            aal: AalConfig::default(),
            apg: ApgConfig::default(),
            trials: 5,
            seed: 0,
            output_dir: None,
            verify: VerifySettings::default(),
            counterexample: CounterexampleSettings::default(),
        };
        match kind {
            // the automatic L_F bounds curvature over all matrices, far above the
            // low-rank curvature that governs the block steps; start lower and backtrack
            ExperimentKind::RmseSweep => Self {
                aal: AalConfig {
                    lf: LfRule::Scaled { factor: 0.2 },
                    l_ratio: 10.0,
                    backtracking: true,
                    ..AalConfig::default()
                },
                ..base
            },
            ExperimentKind::Counterexample => base,
            ExperimentKind::Convergence => Self {
                n: 200,
                m: 200,
                r_star: 10,
                operator: OperatorSpec::FullObservation,
                noise: NoiseSpec::RelativeSpectral { ratio: 0.1 },
                lambda: LambdaRule::FractionOfSigma { c: 0.95, index: 10 },
                aal: AalConfig {
                    schedule: Schedule::None,
                    epsilon: 1e-10,
                    max_iters: 5000,
                    ..AalConfig::default()
                },
                trials: 1,
                ..base
            },
            ExperimentKind::Verify => Self {
                n: 60,
                m: 60,
                r_star: 4,
                operator: OperatorSpec::FullObservation,
                noise: NoiseSpec::Relative { ratio: 0.1 },
                lambda: LambdaRule::NuTimesNoise { nu: 1.2 },
                aal: AalConfig {
                    schedule: Schedule::None,
                    epsilon: 1e-12,
                    max_iters: 100_000,
                    ..AalConfig::default()
                },
                trials: 1,
                ..base
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.r_star == 0 || self.r == Some(0) {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        if self.kind == ExperimentKind::RmseSweep && self.nu_grid.is_empty() {
            return Err(Error::InvalidArgument("empty nu grid".into()));
        }
        Ok(())
    }

    pub fn factor_rank(&self) -> usize {
        self.r.unwrap_or(match self.kind {
            ExperimentKind::RmseSweep => 3 * self.r_star,
            _ => self.r_star,
        })
    }

    /// Hex SHA-256 of the canonical JSON with `output_dir` cleared.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = None;
        let json = serde_json::to_string(&canon).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    fn instance(&self, seed: u64) -> Result<RecoveryInstance> {
        generate_instance(
            self.n,
            self.m,
            self.r_star,
            &self.operator,
            &self.noise,
            seed,
        )
    }
}

/// `||Xf - M*||_F / ||M*||_F`.
pub fn rmse(xf: &Matrix, m_star: &Matrix) -> Result<f64> {
    if xf.shape() != m_star.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            xf.shape(),
            m_star.shape()
        )));
    }
    let norm = m_star.norm();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("zero reference matrix".into()));
    }
    Ok((xf - m_star).norm() / norm)
}

fn metadata_lines(config_hash: &str) -> String {
    format!(
        "# version={}\n# config_hash={config_hash}\n",
        crate::VERSION
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|e| Error::Parse(format!("{s:?}: {e}")))
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub nu: f64,
    pub lambda: f64,
    pub trial: usize,
    pub seed: u64,
    pub aal_rmse: f64,
    pub aal_rank: usize,
    pub aal_iters: usize,
    pub apg_rmse: f64,
    pub apg_rank: usize,
    pub apg_iters: usize,
    /// `ok` or the failure reason.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub nu: f64,
    /// Mean lambda over successful trials (lambda depends on the instance).
    pub lambda: f64,
    pub aal_rmse: f64,
    pub aal_rank: f64,
    pub apg_rmse: f64,
    pub apg_rank: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub version: String,
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
    pub trials: Vec<TrialRecord>,
}

fn sweep_trial(config: &ExperimentConfig, nu: f64, trial: usize, seed: u64) -> TrialRecord {
    let mut rec = TrialRecord {
        nu,
        lambda: f64::NAN,
        trial,
        seed,
        aal_rmse: f64::NAN,
        aal_rank: 0,
        aal_iters: 0,
        apg_rmse: f64::NAN,
        apg_rank: 0,
        apg_iters: 0,
        status: "ok".into(),
    };
    let run = |rec: &mut TrialRecord| -> Result<()> {
        let inst = config.instance(seed)?;
        let rule = match config.lambda {
            LambdaRule::NuTimesNoise { .. } => LambdaRule::NuTimesNoise { nu },
            ref other => other.clone(),
        };
        let lambda = rule.resolve(&inst)?;
        rec.lambda = lambda;
        let r = config.factor_rank();
        let obj = RegularizedObjective::from_instance(&inst, lambda, r)?;
        let aal = aal_solve(&obj, &config.aal, init_spectral(&obj.loss, r)?)?;
        let x = aal.fp.product();
        rec.aal_rmse = rmse(&x, &inst.m_star)?;
        rec.aal_rank = numerical_rank(&x, DEFAULT_RANK_TOL)?;
        rec.aal_iters = aal.iterations;
        let apg = apg_nuclear(&obj.loss, lambda, &config.apg)?;
        rec.apg_rmse = rmse(&apg.x, &inst.m_star)?;
        rec.apg_rank = numerical_rank(&apg.x, DEFAULT_RANK_TOL)?;
        rec.apg_iters = apg.iterations;
        Ok(())
    };
    if let Err(e) = run(&mut rec) {
        log::warn!("sweep trial nu={nu} trial={trial} seed={seed} failed: {e}");
        rec.status = e.to_string().replace(',', ";");
    }
    rec
}

/// Mean RMSE and rank per solver for each grid value; trials run in parallel
/// and trial `t` uses seed `derive_seed(seed, t)` at every grid value.
pub fn run_rmse_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let mut grid = config.nu_grid.clone();
    grid.sort_by(f64::total_cmp);
    let jobs: Vec<(f64, usize)> = grid
        .iter()
        .flat_map(|&nu| (0..config.trials).map(move |t| (nu, t)))
        .collect();
    let trials: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(nu, t)| sweep_trial(config, nu, t, derive_seed(config.seed, t as u64)))
        .collect();
    let rows = grid
        .iter()
        .map(|&nu| {
            let ok: Vec<&TrialRecord> = trials
                .iter()
                .filter(|t| t.nu == nu && t.status == "ok")
                .collect();
            let mean = |f: &dyn Fn(&TrialRecord) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|t| f(t)).sum::<f64>() / ok.len() as f64
                }
            };
            SweepRow {
                nu,
                lambda: mean(&|t| t.lambda),
                aal_rmse: mean(&|t| t.aal_rmse),
                aal_rank: mean(&|t| t.aal_rank as f64),
                apg_rmse: mean(&|t| t.apg_rmse),
                apg_rank: mean(&|t| t.apg_rank as f64),
                trials: ok.len(),
            }
        })
        .collect();
    Ok(SweepResult {
        version: crate::VERSION.into(),
        config_hash: config.hash(),
        rows,
        trials,
    })
}

pub const SWEEP_HEADER: &str = "nu,lambda,aal_rmse,aal_rank,apg_rmse,apg_rank,trials";
pub const TRIALS_HEADER: &str =
    "nu,lambda,trial,seed,aal_rmse,aal_rank,aal_iters,apg_rmse,apg_rank,apg_iters,status";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = metadata_lines(&self.config_hash);
        out.push_str(SWEEP_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                fmt17(r.nu),
                fmt17(r.lambda),
                fmt17(r.aal_rmse),
                fmt17(r.aal_rank),
                fmt17(r.apg_rmse),
                fmt17(r.apg_rank),
                r.trials
            );
        }
        out
    }

    pub fn trials_csv(&self) -> String {
        let mut out = metadata_lines(&self.config_hash);
        out.push_str(TRIALS_HEADER);
        out.push('\n');
        for t in &self.trials {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                fmt17(t.nu),
                fmt17(t.lambda),
                t.trial,
                t.seed,
                fmt17(t.aal_rmse),
                t.aal_rank,
                t.aal_iters,
                fmt17(t.apg_rmse),
                t.apg_rank,
                t.apg_iters,
                t.status
            );
        }
        out
    }
}

/// Reads the rows written by [`SweepResult::to_csv`].
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = data_lines(text);
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(Error::Parse("missing sweep header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Parse(format!("sweep row {line:?}")));
            }
            Ok(SweepRow {
                nu: parse_f64(f[0])?,
                lambda: parse_f64(f[1])?,
                aal_rmse: parse_f64(f[2])?,
                aal_rank: parse_f64(f[3])?,
                apg_rmse: parse_f64(f[4])?,
                apg_rank: parse_f64(f[5])?,
                trials: f[6]
                    .parse()
                    .map_err(|e| Error::Parse(format!("{}: {e}", f[6])))?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// convergence

/// Window of `dist_to_final` values used for the linear fit.
pub const FIT_WINDOW: (f64, f64) = (1e-9, 1e-1);
pub const MIN_FIT_POINTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceFit {
    /// Fit of `ln dist_to_final` against the iteration index.
    pub fit: LineFit,
    /// Per-iteration contraction `exp(slope)`.
    pub rate: f64,
    pub window: [f64; 2],
    pub reliable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceResult {
    pub version: String,
    pub config_hash: String,
    pub lambda: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub final_objective: f64,
    pub fit: ConvergenceFit,
    #[serde(skip)]
    pub trace: SolverTrace,
}

pub fn fit_linear_convergence(trace: &SolverTrace) -> ConvergenceFit {
    let (lo, hi) = FIT_WINDOW;
    let pts: Vec<&TraceRecord> = trace
        .records
        .iter()
        .filter(|r| r.dist_to_final >= lo && r.dist_to_final <= hi)
        .collect();
    let x: Vec<f64> = pts.iter().map(|r| r.iter as f64).collect();
    let y: Vec<f64> = pts.iter().map(|r| r.dist_to_final.ln()).collect();
    let reliable = pts.len() >= MIN_FIT_POINTS;
    let fit = if pts.len() >= 2 {
        theory::line_fit(&x, &y)
    } else {
        LineFit {
            slope: f64::NAN,
            intercept: f64::NAN,
            r_squared: f64::NAN,
            std_error: f64::NAN,
            points: pts.len(),
        }
    };
    ConvergenceFit {
        rate: fit.slope.exp(),
        fit,
        window: [lo, hi],
        reliable,
    }
}

/// Unaccelerated alternating solver on a full-observation instance with the
/// distance to the final iterate recorded at every iteration.
pub fn run_convergence(config: &ExperimentConfig) -> Result<ConvergenceResult> {
    config.validate()?;
    if config.operator != OperatorSpec::FullObservation {
        return Err(Error::InvalidArgument(
            "convergence runs use full observation".into(),
        ));
    }
    let inst = config.instance(config.seed)?;
    let lambda = config.lambda.resolve(&inst)?;
    let r = config.factor_rank();
    let obj = RegularizedObjective::from_instance(&inst, lambda, r)?;
    let solver = AalConfig {
        record_trace: true,
        ..config.aal.clone()
    };
    let out = aal_solve(&obj, &solver, init_spectral(&obj.loss, r)?)?;
    let fit = fit_linear_convergence(&out.trace);
    if !fit.reliable {
        log::warn!(
            "only {} points inside the fit window; fit is unreliable",
            fit.fit.points
        );
    }
    Ok(ConvergenceResult {
        version: crate::VERSION.into(),
        config_hash: config.hash(),
        lambda,
        iterations: out.iterations,
        stop_reason: out.stop_reason,
        final_objective: obj.value(&out.fp),
        fit,
        trace: out.trace,
    })
}

pub const CONVERGENCE_HEADER: &str = "iter,obj,res1,res2,dist_to_final,time_ms,log10_dist";

/// Trace CSV with a `log10_dist` column for log-scale plots.
pub fn trace_csv(trace: &SolverTrace, config_hash: &str) -> String {
    let mut out = metadata_lines(config_hash);
    out.push_str(CONVERGENCE_HEADER);
    out.push('\n');
    for r in &trace.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter,
            fmt17(r.obj),
            fmt17(r.res1),
            fmt17(r.res2),
            fmt17(r.dist_to_final),
            fmt17(r.time_ms),
            fmt17(r.dist_to_final.log10())
        );
    }
    out
}

pub fn parse_trace_csv(text: &str) -> Result<SolverTrace> {
    let mut lines = data_lines(text);
    if lines.next() != Some(CONVERGENCE_HEADER) {
        return Err(Error::Parse("missing convergence trace header".into()));
    }
    let records = lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Parse(format!("trace row {line:?}")));
            }
            Ok(TraceRecord {
                iter: f[0]
                    .parse()
                    .map_err(|e| Error::Parse(format!("{}: {e}", f[0])))?,
                obj: parse_f64(f[1])?,
                res1: parse_f64(f[2])?,
                res2: parse_f64(f[3])?,
                dist_to_final: parse_f64(f[4])?,
                time_ms: parse_f64(f[5])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SolverTrace { records })
}

// ---------------------------------------------------------------------------
// verification

fn check_from_error(id: &str, e: &Error) -> Check {
    let mut c = Check::new(id, f64::NAN, f64::NAN, 0.0, Vec::new());
    c.verdict = Verdict::Fail;
    c.notes.push(format!("audit failed to run: {e}"));
    c
}

fn record(report: &mut TheoryReport, id: &str, result: Result<Vec<Check>>) {
    match result {
        Ok(checks) => report.extend(checks),
        Err(e) => {
            log::warn!("{id}: {e}");
            report.push(check_from_error(id, &e));
        }
    }
}

/// Diagonal matrix for the critical-set audit: `d = (10, 8, 6, 4, 2, 1, 0.5, ...)`.
pub fn critical_diag() -> Result<DiagonalObjective> {
    let mut d = vec![10.0, 8.0, 6.0, 4.0, 2.0, 1.0];
    d.extend((0..14).map(|i| 0.5 * 0.8f64.powi(i)));
    // r* = 3 live directions (lambda > d_4), five factor columns
    DiagonalObjective::new(20, 20, d, 5.0, 5)
}

/// 40 x 40 diagonal instance with distinct singular values, `r = 5`, `lambda = 0.5 sigma_5`.
pub fn oracle_diag() -> Result<DiagonalObjective> {
    let sigma: Vec<f64> = (0..40).map(|i| 20.0 * 0.85f64.powi(i)).collect();
    let lambda = 0.5 * sigma[4];
    DiagonalObjective::new(40, 40, sigma, lambda, 5)
}

/// 30 x 30 diagonal with three distinct leading values `9, 6, 3` (each twice)
/// and a small tail, `r = 6`.
pub fn kl_sigma() -> Vec<f64> {
    let mut sigma = vec![9.0, 9.0, 6.0, 6.0, 3.0, 3.0];
    sigma.extend((0..24).map(|i| 1.0 * 0.9f64.powi(i)));
    sigma
}

/// One lambda strictly inside each gap class `k = 0, 1, s`.
pub const KL_LAMBDAS: [(usize, f64); 3] = [(0, 10.0), (1, 7.5), (3, 2.0)];

fn global_oracle_checks(diag: &DiagonalObjective, config: &AalConfig) -> Result<Vec<Check>> {
    let (fp_opt, value) = theory::global_set_fullobs(diag)?;
    let obj = diag.objective();
    let out = aal_solve(&obj, config, init_spectral(&obj.loss, diag.r)?)?;
    let x_an = fp_opt.product();
    let rel_obj = (obj.value(&out.fp) - value).abs() / value.abs();
    let rel_x = (out.fp.product() - &x_an).norm() / x_an.norm();
    Ok(vec![
        Check::new("global-set.objective", rel_obj, 1e-8, 0.0, Vec::new())
            .with_value("optimal_value", value),
        Check::new("global-set.solution", rel_x, 1e-6, 0.0, Vec::new()),
        theory::balance_audit(&out.fp)?,
    ])
}

fn kl_checks(samples: usize, seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (k, lambda) in KL_LAMBDAS {
        let diag = DiagonalObjective::new(30, 30, kl_sigma(), lambda, 6)?;
        let (center, _) = theory::global_set_fullobs(&diag)?;
        let probe = theory::kl_probe(
            &diag,
            &center,
            &KlProbeConfig {
                samples,
                seed: derive_seed(seed, k as u64),
                ..KlProbeConfig::default()
            },
        )?;
        let mut c = probe.check;
        c.id = format!("kl-probe.gap-class-{k}");
        checks.push(c);
    }
    Ok(checks)
}

/// Probe at the repeated-value critical point of the counterexample; the
/// failure signature is a sampled ratio below `1e-6 lambda`.
pub fn kl_failure_signature(a: f64, lambda: f64, samples: usize, seed: u64) -> Result<Check> {
    let (diag, base) = theory::counterexample_objective(a, lambda)?;
    let probe = theory::kl_probe(
        &diag,
        &base,
        &KlProbeConfig {
            samples,
            seed,
            radius: None,
            center_kind: theory::CenterKind::CriticalPoint,
        },
    )?;
    let mut c = Check::new(
        "kl-probe.failure-signature",
        probe.eta_hat,
        1e-6 * lambda,
        0.0,
        probe.check.premises.clone(),
    )
    .with_value("eta_hat", probe.eta_hat)
    .with_value("delta", probe.delta)
    .with_value("positive_samples", probe.positive_samples as f64);
    c.notes
        .push("passes when some sampled ratio falls below 1e-6 lambda".into());
    Ok(c)
}

/// The calmness threshold at the counterexample point exceeds `lambda`.
fn calmness_violation(a: f64, lambda: f64, seed: u64) -> Result<Check> {
    let (diag, base) = theory::counterexample_objective(a, lambda)?;
    let op = crate::sampling::SamplingOperator::full(2, 2);
    let est = theory::calmness_estimate(&op, &diag.sigma_matrix(), &base, 1e-4, 400, seed)?;
    let c_bar = est.c1_hat.max(est.c2_hat);
    Ok(Check::new(
        "calmness.counterexample-threshold-exceeds-lambda",
        lambda,
        theory::calmness_threshold(c_bar, 0.0),
        0.0,
        Vec::new(),
    )
    .with_value("c1_hat", est.c1_hat)
    .with_value("c2_hat", est.c2_hat)
    .with_note(est.note))
}

fn equivalence_checks(config: &ExperimentConfig) -> Result<Vec<Check>> {
    let v = &config.verify;
    let inst = generate_instance(
        v.equivalence_n,
        v.equivalence_m,
        v.equivalence_r_star,
        &OperatorSpec::gaussian(v.equivalence_p),
        &NoiseSpec::Relative { ratio: 0.1 },
        derive_seed(config.seed, 7),
    )?;
    let lambda = v.equivalence_nu * inst.noise_adjoint_norm();
    let r = 3 * v.equivalence_r_star;
    let loss = LeastSquaresLoss::from_instance(&inst);
    let apg = apg_nuclear(
        &loss,
        lambda,
        &ApgConfig {
            epsilon: 1e-9,
            max_iters: 20_000,
            ..ApgConfig::default()
        },
    )?;
    let obj = RegularizedObjective::new(loss.clone(), lambda, r)?;
    let aal = aal_solve(
        &obj,
        &AalConfig {
            epsilon: 1e-9,
            max_iters: 20_000,
            ..AalConfig::default()
        },
        init_spectral(&loss, r)?,
    )?;
    theory::equivalence_audit(&loss, lambda, r, &apg, &aal, v.equivalence_tolerance)
}

fn curvature_checks(seed: u64) -> Result<Vec<Check>> {
    let op = std::sync::Arc::new(
        OperatorSpec::Weighted {
            low: 0.95,
            high: 1.05,
        }
        .build(20, 20, seed)?,
    );
    let spectrum = estimate_restricted_spectrum(&op, 4, 1, seed)?;
    let loss = LeastSquaresLoss::new(op, crate::matrix::Vector::zeros(400))?;
    Ok(vec![theory::curvature_audit(
        &loss, &spectrum, 4, 200, seed,
    )])
}

/// Runs every audit in a fixed order and collects the checks. Individual
/// failures are recorded and the run continues.
pub fn run_verify(config: &ExperimentConfig) -> Result<TheoryReport> {
    config.validate()?;
    let mut report = TheoryReport::new(&config.hash());
    let inst = config.instance(config.seed)?;
    let lambda = config.lambda.resolve(&inst)?;
    let r = config.factor_rank();
    let obj = RegularizedObjective::from_instance(&inst, lambda, r)?;
    let solved = aal_solve(&obj, &config.aal, init_spectral(&obj.loss, r)?)?;
    let fp = solved.fp;

    record(
        &mut report,
        "balance",
        theory::balance_audit(&fp).map(|c| vec![c]),
    );
    record(
        &mut report,
        "diag-critical",
        critical_diag().and_then(|diag| {
            let o = diag.objective();
            let out = aal_solve(&o, &config.aal, init_spectral(&o.loss, diag.r)?)?;
            Ok(vec![theory::diag_critical_audit(&diag, &out.fp, 3)?])
        }),
    );
    record(
        &mut report,
        "global-set",
        oracle_diag().and_then(|d| {
            let cfg = AalConfig {
                schedule: Schedule::None,
                epsilon: 1e-10,
                max_iters: 100_000,
                ..AalConfig::default()
            };
            global_oracle_checks(&d, &cfg)
        }),
    );

    let spectrum = match config.verify.spectrum_override {
        Some([a, b]) => Ok(SpectrumEstimate::supplied(a, b)),
        None => estimate_restricted_spectrum(
            &inst.operator,
            4 * inst.r_star,
            50,
            derive_seed(config.seed, 11),
        ),
    };
    match spectrum {
        Ok(spectrum) => {
            let probe = obj.min_eig_hessian(&fp, 1e-9);
            record(
                &mut report,
                "deviation-bound",
                theory::deviation_bound_audit(&inst, &fp, lambda, &spectrum),
            );
            record(
                &mut report,
                "critical-identity",
                theory::critical_identity_audit(&inst, &fp, lambda, &spectrum, Some(&probe)),
            );
            let eb = theory::error_bound_audit(&inst, &fp, lambda, &spectrum, Some(&probe));
            if let Ok(checks) = &eb {
                if checks.iter().any(|c| {
                    c.premises
                        .iter()
                        .any(|p| p.name == "moduli-admissible" && !p.ok)
                }) {
                    report.push(
                        Check::not_applicable(
                            "error-bound.spectrum",
                            Vec::new(),
                            "inadmissible spectrum",
                        )
                        .with_value("moduli_ratio", spectrum.beta / spectrum.alpha),
                    );
                }
            }
            record(&mut report, "error-bound", eb);
        }
        Err(e) => report.push(check_from_error("restricted-spectrum", &e)),
    }

    record(
        &mut report,
        "curvature",
        curvature_checks(derive_seed(config.seed, 12)),
    );
    record(
        &mut report,
        "kl-probe",
        kl_checks(config.verify.kl_samples, derive_seed(config.seed, 13)),
    );
    let ce = &config.counterexample;
    record(
        &mut report,
        "kl-probe.failure-signature",
        kl_failure_signature(
            ce.a,
            ce.lambda,
            config.verify.kl_samples,
            derive_seed(config.seed, 14),
        )
        .map(|c| vec![c]),
    );
    record(
        &mut report,
        "calmness",
        calmness_violation(ce.a, ce.lambda, derive_seed(config.seed, 15)).map(|c| vec![c]),
    );
    record(
        &mut report,
        "counterexample",
        theory::counterexample_sequence(ce.a, ce.lambda, ce.k_max).map(|r| r.checks),
    );
    record(&mut report, "equivalence", equivalence_checks(config));
    Ok(report)
}

// ---------------------------------------------------------------------------
// counterexample

pub const COUNTEREXAMPLE_HEADER: &str = "k,gap,grad_sq,ratio";

pub fn run_counterexample(config: &ExperimentConfig) -> Result<CounterexampleReport> {
    let ce = &config.counterexample;
    theory::counterexample_sequence(ce.a, ce.lambda, ce.k_max)
}

pub fn counterexample_csv(report: &CounterexampleReport, config_hash: &str) -> String {
    let mut out = metadata_lines(config_hash);
    out.push_str(COUNTEREXAMPLE_HEADER);
    out.push('\n');
    for p in &report.points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.k,
            fmt17(p.gap),
            fmt17(p.grad_sq),
            fmt17(p.ratio)
        );
    }
    out
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    version: &'a str,
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn stamped_json<T: Serialize>(body: &T, config_hash: &str) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Stamped {
        version: crate::VERSION,
        config_hash,
        body,
    })?)
}

// ---------------------------------------------------------------------------
// output

/// Paths written by [`run_and_emit`].
#[derive(Clone, Debug, Default)]
pub struct Emitted {
    pub files: Vec<PathBuf>,
}

/// Sweep: `sweep.csv`, `sweep_trials.csv`. Convergence: `trace.csv`, `fit.json`.
/// Verify: `report.json`. Counterexample: `counterexample.csv`, `counterexample.json`.
pub fn run_and_emit(config: &ExperimentConfig, dir: &Path) -> Result<Emitted> {
    let hash = config.hash();
    let mut files = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        write_text(&path, &text)?;
        files.push(path);
        Ok(())
    };
    match config.kind {
        ExperimentKind::RmseSweep => {
            let res = run_rmse_sweep(config)?;
            put("sweep.csv", res.to_csv())?;
            put("sweep_trials.csv", res.trials_csv())?;
        }
        ExperimentKind::Convergence => {
            let res = run_convergence(config)?;
            put("trace.csv", trace_csv(&res.trace, &hash))?;
            put("fit.json", serde_json::to_string_pretty(&res)?)?;
        }
        ExperimentKind::Verify => {
            put("report.json", run_verify(config)?.to_json()?)?;
        }
        ExperimentKind::Counterexample => {
            let rep = run_counterexample(config)?;
            put("counterexample.csv", counterexample_csv(&rep, &hash))?;
            put("counterexample.json", stamped_json(&rep, &hash)?)?;
        }
    }
    Ok(Emitted { files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_cases() {
        let m = Matrix::from_fn(4, 3, |i, j| (i + 2 * j) as f64 + 1.0);
        assert_eq!(rmse(&m, &m).unwrap(), 0.0);
        assert_eq!(rmse(&Matrix::zeros(4, 3), &m).unwrap(), 1.0);
        assert!((rmse(&(&m * 1.1), &m).unwrap() - 0.1).abs() < 1e-12);
        assert!(rmse(&m, &Matrix::zeros(4, 3)).is_err());
        assert!(rmse(&Matrix::zeros(3, 4), &m).is_err());
    }

    #[test]
    fn config_json_and_hash() {
        let cfg = ExperimentConfig::desk(ExperimentKind::Convergence);
        let json = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let moved = ExperimentConfig {
            output_dir: Some("elsewhere".into()),
            ..cfg.clone()
        };
        assert_eq!(moved.hash(), cfg.hash());
        let reseeded = ExperimentConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(reseeded.hash(), cfg.hash());
        // partial documents fill in defaults
        let partial = ExperimentConfig::from_json(
            r#"{"kind":"verify","seed":4,"lambda":{"rule":"absolute","lambda":0.5}}"#,
        )
        .unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.lambda, LambdaRule::Absolute { lambda: 0.5 });
        assert!(ExperimentConfig::from_json(r#"{"trials":0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"n":0}"#).is_err());
    }

    #[test]
    fn lambda_rules() {
        let inst = generate_instance(
            12,
            12,
            2,
            &OperatorSpec::FullObservation,
            &NoiseSpec::Relative { ratio: 0.1 },
            1,
        )
        .unwrap();
        let sv = singular_values(&inst.operator.adjoint(&inst.y)).unwrap();
        let l = LambdaRule::FractionOfSigma { c: 0.95, index: 2 }
            .resolve(&inst)
            .unwrap();
        assert_eq!(l, 0.95 * sv[1]);
        let l = LambdaRule::NuTimesNoise { nu: 2.0 }.resolve(&inst).unwrap();
        assert_eq!(l, 2.0 * inst.noise_adjoint_norm());
        assert!(LambdaRule::FractionOfSigma { c: 1.0, index: 13 }
            .resolve(&inst)
            .is_err());
        let clean = generate_instance(
            12,
            12,
            2,
            &OperatorSpec::FullObservation,
            &NoiseSpec::None,
            1,
        )
        .unwrap();
        assert!(LambdaRule::NuTimesNoise { nu: 1.0 }
            .resolve(&clean)
            .is_err());
    }

    fn small_sweep() -> ExperimentConfig {
        ExperimentConfig {
            n: 16,
            m: 16,
            r_star: 2,
            operator: OperatorSpec::gaussian(200),
            nu_grid: vec![1.5, 0.5],
            trials: 2,
            seed: 9,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn sweep_rows_sorted_and_csv_round_trip() {
        let res = run_rmse_sweep(&small_sweep()).unwrap();
        assert_eq!(res.rows.len(), 2);
        assert!(res.rows[0].nu < res.rows[1].nu);
        assert!(res.trials.iter().all(|t| t.status == "ok"));
        let csv = res.to_csv();
        assert_eq!(data_lines(&csv).count(), 3);
        assert!(csv.contains(&res.config_hash) && csv.contains(crate::VERSION));
        let back = parse_sweep_csv(&csv).unwrap();
        for (a, b) in back.iter().zip(res.rows.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(run_rmse_sweep(&small_sweep()).unwrap().to_csv(), csv);
    }

    #[test]
    fn noiseless_sweep_recovers() {
        let cfg = ExperimentConfig {
            noise: NoiseSpec::None,
            lambda: LambdaRule::Absolute { lambda: 1e-6 },
            nu_grid: vec![1.0],
            trials: 1,
            aal: AalConfig {
                epsilon: 1e-9,
                max_iters: 20_000,
                ..AalConfig::default()
            },
            apg: ApgConfig {
                epsilon: 1e-9,
                max_iters: 20_000,
                ..ApgConfig::default()
            },
            operator: OperatorSpec::gaussian(300),
            ..small_sweep()
        };
        let res = run_rmse_sweep(&cfg).unwrap();
        let row = &res.rows[0];
        assert!(row.aal_rmse <= 1e-3 && row.apg_rmse <= 1e-3, "{row:?}");
    }

    #[test]
    fn permuted_trial_seeds_keep_averages() {
        // averages are over the same set of (seed, instance) pairs in a different order
        let cfg = small_sweep();
        let res = run_rmse_sweep(&cfg).unwrap();
        let mut recs = res.trials.clone();
        recs.reverse();
        for row in &res.rows {
            let v: Vec<f64> = recs
                .iter()
                .filter(|t| t.nu == row.nu)
                .map(|t| t.aal_rmse)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            assert!((mean - row.aal_rmse).abs() <= 1e-12);
        }
    }

    #[test]
    fn convergence_trace_and_fit() {
        let cfg = ExperimentConfig {
            n: 30,
            m: 30,
            r_star: 3,
            lambda: LambdaRule::FractionOfSigma { c: 0.5, index: 3 },
            ..ExperimentConfig::desk(ExperimentKind::Convergence)
        };
        let res = run_convergence(&cfg).unwrap();
        assert!(
            res.fit.reliable && res.fit.fit.r_squared > 0.98,
            "{:?}",
            res.fit
        );
        assert!(res.fit.rate < 1.0);
        let csv = trace_csv(&res.trace, &res.config_hash);
        assert_eq!(data_lines(&csv).count(), res.trace.records.len() + 1);
        assert_eq!(parse_trace_csv(&csv).unwrap(), res.trace);
        let sensing = ExperimentConfig {
            operator: OperatorSpec::gaussian(100),
            ..cfg
        };
        assert!(run_convergence(&sensing).is_err());
    }

    #[test]
    fn short_trace_fit_is_unreliable() {
        let trace = SolverTrace {
            records: (0..5)
                .map(|i| TraceRecord {
                    iter: i,
                    obj: 1.0,
                    res1: 0.0,
                    res2: 0.0,
                    dist_to_final: 0.01 * 0.5f64.powi(i as i32),
                    time_ms: 0.0,
                })
                .collect(),
        };
        let fit = fit_linear_convergence(&trace);
        assert!(!fit.reliable);
        assert!((fit.rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn counterexample_files() {
        let cfg = ExperimentConfig::desk(ExperimentKind::Counterexample);
        let dir = tempfile::tempdir().unwrap();
        let out = run_and_emit(&cfg, dir.path()).unwrap();
        assert_eq!(out.files.len(), 2);
        let csv = std::fs::read_to_string(&out.files[0]).unwrap();
        assert_eq!(data_lines(&csv).count(), 201);
        let json = std::fs::read_to_string(&out.files[1]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["config_hash"], cfg.hash());
        assert_eq!(v["version"], crate::VERSION);
    }

    #[test]
    fn forced_inadmissible_spectrum_gates_error_bound() {
        let mut cfg = ExperimentConfig::desk(ExperimentKind::Verify);
        cfg.n = 20;
        cfg.m = 20;
        cfg.r_star = 2;
        cfg.verify.spectrum_override = Some([1.0, 1.5]);
        cfg.verify.kl_samples = 20;
        cfg.verify.equivalence_n = 12;
        cfg.verify.equivalence_m = 12;
        cfg.verify.equivalence_p = 300;
        cfg.verify.equivalence_r_star = 1;
        let report = run_verify(&cfg).unwrap();
        let eb: Vec<&Check> = report
            .checks
            .iter()
            .filter(|c| c.id.starts_with("error-bound"))
            .collect();
        assert!(!eb.is_empty());
        assert!(eb.iter().all(|c| c.verdict == Verdict::NotApplicable));
        assert!(report.get("error-bound.spectrum").is_some());
        assert!(report.get("balance").unwrap().passed());
    }
}
