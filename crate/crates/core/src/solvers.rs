//! Accelerated alternating minimization for the factored objective and a
//! proximal-gradient baseline for the nuclear-norm problem
//! `min_X f(X) + lambda ||X||_*`.

use std::fmt::Write as _;
use std::time::Instant;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{fmt17, thin_svd, FactorPair, Matrix};
use crate::objective::{LeastSquaresLoss, RegularizedObjective, SmoothLoss};

/// Extrapolation schedule for `beta_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    None,
    Nesterov,
    Fixed { beta: f64 },
}

/// How `L_F` is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LfRule {
    Auto,
    Fixed {
        value: f64,
    },
    /// `factor` times the automatic value; pair with backtracking when `factor < 1`.
    Scaled {
        factor: f64,
    },
}

/// Solver settings; `lambda` and `r` live on the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AalConfig {
    pub lf: LfRule,
    /// Extrapolation cap constant `L >= L_F`; `None` falls back to `l_ratio`.
    pub l_cap: Option<f64>,
    /// `L = l_ratio * L_F` (initial `L_F`) when `l_cap` is unset; default 1.
    pub l_ratio: f64,
    pub schedule: Schedule,
    pub epsilon: f64,
    pub max_iters: usize,
    pub record_trace: bool,
    /// Doubles `L_F` whenever a block update breaks its quadratic upper model.
    pub backtracking: bool,
    /// Record wall time per iteration; off keeps traces byte-reproducible.
    pub timing: bool,
}

impl Default for AalConfig {
    fn default() -> Self {
        Self {
            lf: LfRule::Auto,
            l_cap: None,
            l_ratio: 1.0,
            schedule: Schedule::Nesterov,
            epsilon: 1e-5,
            max_iters: 5000,
            record_trace: false,
            backtracking: false,
            timing: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    IterationCap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub obj: f64,
    pub res1: f64,
    pub res2: f64,
    /// `||(U^k, V^k) - (U^f, V^f)||_F`, filled after the run.
    pub dist_to_final: f64,
    /// Zero unless timing was requested.
    pub time_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub records: Vec<TraceRecord>,
}

pub const TRACE_HEADER: &str = "iter,obj,res1,res2,dist_to_final,time_ms";

impl SolverTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter,
                fmt17(r.obj),
                fmt17(r.res1),
                fmt17(r.res2),
                fmt17(r.dist_to_final),
                fmt17(r.time_ms)
            );
        }
        out
    }

    /// Parses [`Self::to_csv`] output; `#` metadata lines are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next().map(str::trim) != Some(TRACE_HEADER) {
            return Err(Error::Parse("missing trace header".into()));
        }
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!("trace row {line:?}")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{s:?}: {e}")))
            };
            records.push(TraceRecord {
                iter: f[0]
                    .parse()
                    .map_err(|e| Error::Parse(format!("{}: {e}", f[0])))?,
                obj: num(f[1])?,
                res1: num(f[2])?,
                res2: num(f[3])?,
                dist_to_final: num(f[4])?,
                time_ms: num(f[5])?,
            });
        }
        Ok(Self { records })
    }
}

#[derive(Clone, Debug)]
pub struct AalOutcome {
    pub fp: FactorPair,
    pub trace: SolverTrace,
    pub stop_reason: StopReason,
    pub iterations: usize,
    /// Normalized `(res1, res2)` at the returned iterate.
    pub residuals: (f64, f64),
    /// Final `L_F` (differs from the initial value only under backtracking).
    pub lf: f64,
    /// Iterations where Nesterov's `beta` hit the cap.
    pub clip_events: usize,
}

/// `(P Diag(sqrt(sigma^r)), Q Diag(sqrt(sigma^r)))` from the top-`r` SVD of `x0`.
pub fn init_spectral_from(x0: &Matrix, r: usize) -> Result<FactorPair> {
    let (n, m) = x0.shape();
    if r == 0 || r > n.min(m) {
        return Err(Error::InvalidArgument(format!(
            "rank {r} outside 1..={}",
            n.min(m)
        )));
    }
    let svd = thin_svd(x0)?.truncate(r);
    let mut u = svd.left;
    let mut v = svd.right;
    for j in 0..r {
        let s = svd.singulars[j].sqrt();
        u.column_mut(j).scale_mut(s);
        v.column_mut(j).scale_mut(s);
    }
    FactorPair::new(u, v)
}

/// Spectral start from `X^0 = A*(y)`.
pub fn init_spectral(loss: &LeastSquaresLoss, r: usize) -> Result<FactorPair> {
    init_spectral_from(&loss.operator.adjoint(&loss.y), r)
}

/// `2 * curvature * max(||U0||^2, ||V0||^2)` with spectral norms; the factor 2
/// is a safety margin over the block Lipschitz constants.
pub fn auto_lf<L: SmoothLoss>(obj: &RegularizedObjective<L>, start: &FactorPair) -> f64 {
    let su = crate::matrix::spectral_norm(&start.u, 1e-10);
    let sv = crate::matrix::spectral_norm(&start.v, 1e-10);
    let scale = su.max(sv).powi(2);
    let curvature = obj.loss.curvature_bound();
    if scale > 0.0 {
        2.0 * curvature * scale
    } else {
        2.0 * curvature
    }
}

/// `sqrt(L / (L + L_F))`.
pub fn beta_cap(l: f64, lf: f64) -> f64 {
    (l / (l + lf)).sqrt()
}

/// One step of Nesterov's recursion:
/// `beta_k = (theta_{k-1} - 1) / theta_k`,
/// `theta_{k+1} = (1 + sqrt(1 + 4 theta_k^2)) / 2`, beta clipped to `[0, cap]`.
/// Returns `(beta_k, theta_{k+1}, clipped)`.
pub fn nesterov_beta(theta_prev: f64, theta: f64, cap: f64) -> (f64, f64, bool) {
    let raw = (theta_prev - 1.0) / theta;
    let next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
    let beta = raw.clamp(0.0, cap);
    (beta, next, raw > cap)
}

/// Closed-form minimizer of
/// `<g, U - U~> + (L_F/2)||U - U~||^2 + (lambda/2)||U||^2`.
fn block_update(tilde: &Matrix, block_grad: &Matrix, lf: f64, lambda: f64) -> Matrix {
    (tilde * lf - block_grad) / (lf + lambda)
}

/// One AAL step from `(U^k, V^k)` with previous iterate `(U^{k-1}, V^{k-1})`.
pub fn aal_step<L: SmoothLoss>(
    obj: &RegularizedObjective<L>,
    current: &FactorPair,
    previous: &FactorPair,
    beta: f64,
    lf: f64,
) -> FactorPair {
    let u_tilde = &current.u + (&current.u - &previous.u) * beta;
    let g = obj.loss.gradient(&(&u_tilde * current.v.transpose()));
    let u_next = block_update(&u_tilde, &(g * &current.v), lf, obj.lambda);
    let v_tilde = &current.v + (&current.v - &previous.v) * beta;
    let g = obj.loss.gradient(&(&u_next * v_tilde.transpose()));
    let v_next = block_update(&v_tilde, &g.tr_mul(&u_next), lf, obj.lambda);
    FactorPair {
        u: u_next,
        v: v_next,
    }
}

struct StepResult {
    next: FactorPair,
    res1: f64,
    res2: f64,
    /// `f` and `grad f` at the new iterate; reused when the next step has `beta = 0`.
    f_next: f64,
    grad_next: Matrix,
    lf: f64,
}

/// Step with the literal stopping residuals and optional backtracking.
fn full_step<L: SmoothLoss>(
    obj: &RegularizedObjective<L>,
    current: &FactorPair,
    previous: &FactorPair,
    at_current: Option<&(f64, Matrix)>,
    beta: f64,
    mut lf: f64,
    backtracking: bool,
) -> StepResult {
    let lambda = obj.lambda;
    let u_tilde = &current.u + (&current.u - &previous.u) * beta;
    let x_tilde = &u_tilde * current.v.transpose();
    let (f_tilde, g_u) = match at_current {
        Some((f, g)) if beta == 0.0 => (*f, g.clone()),
        _ => obj.loss.value_and_gradient(&x_tilde),
    };
    let grad1_tilde = &g_u * &current.v;
    let mut u_next = block_update(&u_tilde, &grad1_tilde, lf, lambda);
    if backtracking {
        loop {
            let d = &u_next - &u_tilde;
            let model = f_tilde + grad1_tilde.dot(&d) + 0.5 * lf * d.norm_squared();
            let actual = obj.loss.value(&(&u_next * current.v.transpose()));
            if actual <= model + 1e-12 * model.abs().max(1.0) {
                break;
            }
            lf *= 2.0;
            debug!("backtracking: L_F doubled to {lf:e} in the U block");
            u_next = block_update(&u_tilde, &grad1_tilde, lf, lambda);
        }
    }

    let v_tilde = &current.v + (&current.v - &previous.v) * beta;
    let x_half = &u_next * v_tilde.transpose();
    let (f_half, g_v) = obj.loss.value_and_gradient(&x_half);
    let grad2_tilde = g_v.tr_mul(&u_next);
    let mut v_next = block_update(&v_tilde, &grad2_tilde, lf, lambda);
    let (mut f_next, mut grad_next) = obj.loss.value_and_gradient(&(&u_next * v_next.transpose()));
    if backtracking {
        loop {
            let d = &v_next - &v_tilde;
            let model = f_half + grad2_tilde.dot(&d) + 0.5 * lf * d.norm_squared();
            if f_next <= model + 1e-12 * model.abs().max(1.0) {
                break;
            }
            lf *= 2.0;
            debug!("backtracking: L_F doubled to {lf:e} in the V block");
            v_next = block_update(&v_tilde, &grad2_tilde, lf, lambda);
            (f_next, grad_next) = obj.loss.value_and_gradient(&(&u_next * v_next.transpose()));
        }
    }

    let r1 = &grad1_tilde - &grad_next * &v_next + (&u_next - &u_tilde) * lf;
    let r2 = &grad2_tilde - grad_next.tr_mul(&u_next) + (&v_next - &v_tilde) * lf;
    StepResult {
        next: FactorPair {
            u: u_next,
            v: v_next,
        },
        res1: r1.norm(),
        res2: r2.norm(),
        f_next,
        grad_next,
        lf,
    }
}

struct RunOutput {
    best: FactorPair,
    best_obj: f64,
    last: FactorPair,
    stop_reason: StopReason,
    iterations: usize,
    residuals: (f64, f64),
    lf: f64,
    clip_events: usize,
    records: Vec<TraceRecord>,
}

fn run<L: SmoothLoss>(
    obj: &RegularizedObjective<L>,
    config: &AalConfig,
    start: &FactorPair,
    mut observe: impl FnMut(usize, &FactorPair),
) -> Result<RunOutput> {
    let mut lf = match config.lf {
        LfRule::Auto => auto_lf(obj, start),
        LfRule::Fixed { value } => value,
        LfRule::Scaled { factor } => factor * auto_lf(obj, start),
    };
    if !(lf > 0.0 && lf.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "L_F = {lf} must be positive"
        )));
    }
    if !(config.l_ratio >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "l_ratio {} < 1",
            config.l_ratio
        )));
    }
    let l_cap = config.l_cap.unwrap_or(config.l_ratio * lf);
    let cap = beta_cap(l_cap, lf);
    if let Schedule::Fixed { beta } = config.schedule {
        if !(0.0..=cap).contains(&beta) {
            return Err(Error::InvalidArgument(format!(
                "fixed beta {beta} outside [0, {cap}]"
            )));
        }
    }
    let normalizer = obj.loss.residual_normalizer();
    let clock = Instant::now();
    let mut previous = start.clone();
    let mut current = start.clone();
    let mut at_current: Option<(f64, Matrix)> = None;
    let (mut theta_prev, mut theta) = (1.0_f64, 1.0_f64);
    let mut clip_events = 0;
    let mut records = Vec::new();
    let mut best = start.clone();
    let mut best_obj = obj.value(start);
    let mut residuals = (f64::INFINITY, f64::INFINITY);
    observe(0, start);
    for k in 0..config.max_iters {
        let beta = match config.schedule {
            Schedule::None => 0.0,
            Schedule::Fixed { beta } => beta,
            Schedule::Nesterov => {
                let (b, next, clipped) = nesterov_beta(theta_prev, theta, cap);
                if clipped {
                    clip_events += 1;
                    debug!("iteration {k}: beta clipped to {cap:.6}");
                }
                theta_prev = theta;
                theta = next;
                b
            }
        };
        let step = full_step(
            obj,
            &current,
            &previous,
            at_current.as_ref(),
            beta,
            lf,
            config.backtracking,
        );
        if !step.next.is_finite() || !step.res1.is_finite() || !step.res2.is_finite() {
            return Err(Error::Diverged { iteration: k + 1 });
        }
        lf = step.lf;
        let value = step.f_next + 0.5 * obj.lambda * step.next.norm_squared();
        if !value.is_finite() {
            return Err(Error::Diverged { iteration: k + 1 });
        }
        residuals = (step.res1 / normalizer, step.res2 / normalizer);
        observe(k + 1, &step.next);
        if config.record_trace {
            records.push(TraceRecord {
                iter: k + 1,
                obj: value,
                res1: residuals.0,
                res2: residuals.1,
                dist_to_final: f64::NAN,
                time_ms: if config.timing {
                    clock.elapsed().as_secs_f64() * 1e3
                } else {
                    0.0
                },
            });
        }
        previous = std::mem::replace(&mut current, step.next);
        at_current = Some((step.f_next, step.grad_next));
        let converged = residuals.0 <= config.epsilon && residuals.1 <= config.epsilon;
        if value <= best_obj || converged {
            best_obj = value;
            best = current.clone();
        }
        if converged {
            return Ok(RunOutput {
                best,
                best_obj,
                last: current,
                stop_reason: StopReason::Converged,
                iterations: k + 1,
                residuals,
                lf,
                clip_events,
                records,
            });
        }
    }
    Ok(RunOutput {
        best,
        best_obj,
        last: current,
        stop_reason: StopReason::IterationCap,
        iterations: config.max_iters,
        residuals,
        lf,
        clip_events,
        records,
    })
}

/// Runs the alternating solver from `start`. Stops when both normalized
/// residuals are at most `epsilon`; on the iteration cap the lowest-objective
/// iterate is returned. With `record_trace`, a deterministic replay fills the
/// distance of each iterate to the returned one.
pub fn aal_solve<L: SmoothLoss>(
    obj: &RegularizedObjective<L>,
    config: &AalConfig,
    start: FactorPair,
) -> Result<AalOutcome> {
    if !(config.epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    if start.rank() != obj.r {
        return Err(Error::Shape(format!(
            "start has {} columns, objective rank is {}",
            start.rank(),
            obj.r
        )));
    }
    let out = run(obj, config, &start, |_, _| {})?;
    let final_fp = match out.stop_reason {
        StopReason::Converged => out.last.clone(),
        StopReason::IterationCap => out.best.clone(),
    };
    let mut records = out.records;
    if config.record_trace {
        let mut dists = Vec::with_capacity(records.len());
        run(obj, config, &start, |k, fp| {
            if k > 0 {
                dists.push(fp.sub(&final_fp).norm());
            }
        })?;
        for (rec, d) in records.iter_mut().zip(dists) {
            rec.dist_to_final = d;
        }
    }
    let _ = out.best_obj;
    Ok(AalOutcome {
        fp: final_fp,
        trace: SolverTrace { records },
        stop_reason: out.stop_reason,
        iterations: out.iterations,
        residuals: out.residuals,
        lf: out.lf,
        clip_events: out.clip_events,
    })
}

/// Singular value soft-thresholding `P Diag((sigma - tau)_+) Q^T`.
pub fn svt(z: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {tau} < 0")));
    }
    let svd = thin_svd(z)?;
    let mut left = svd.left;
    let mut kept = 0;
    for j in 0..svd.singulars.len() {
        let s = (svd.singulars[j] - tau).max(0.0);
        if s > 0.0 {
            kept = j + 1;
        }
        left.column_mut(j).scale_mut(s);
    }
    Ok(left.columns(0, kept) * svd.right.columns(0, kept).transpose())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApgConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Halve the step until the quadratic upper model holds; the default is
    /// the fixed step `1 / (2 * scale * ||A||^2)`.
    pub backtracking: bool,
}

impl Default for ApgConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_iters: 5000,
            backtracking: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApgRecord {
    pub iter: usize,
    pub obj: f64,
    pub rel_change: f64,
}

#[derive(Clone, Debug)]
pub struct ApgOutcome {
    pub x: Matrix,
    pub trace: Vec<ApgRecord>,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub objective: f64,
}

/// `f(X) + lambda ||X||_*`.
pub fn convex_objective<L: SmoothLoss>(loss: &L, lambda: f64, x: &Matrix) -> Result<f64> {
    Ok(loss.value(x) + lambda * crate::matrix::nuclear_norm(x)?)
}

/// Monotone accelerated proximal gradient for `f(X) + lambda ||X||_*`,
/// started at zero. A momentum step that would raise the objective is
/// replaced by the previous iterate. Stops when an accepted step has
/// `||X+ - X||_F / max(1, ||X||_F) <= epsilon`.
pub fn apg_nuclear<L: SmoothLoss>(loss: &L, lambda: f64, config: &ApgConfig) -> Result<ApgOutcome> {
    if !(lambda > 0.0) || !(config.epsilon > 0.0) {
        return Err(Error::InvalidArgument(
            "lambda and epsilon must be > 0".into(),
        ));
    }
    let (n, m) = loss.dims();
    let mut step = 1.0 / loss.curvature_bound();
    let mut x = Matrix::zeros(n, m);
    let mut x_obj = convex_objective(loss, lambda, &x)?;
    let mut z = x.clone();
    let mut t = 1.0_f64;
    let mut trace = Vec::new();
    for k in 0..config.max_iters {
        let (fz, gz) = loss.value_and_gradient(&z);
        let mut u = svt(&(&z - &gz * step), step * lambda)?;
        if config.backtracking {
            loop {
                let d = &u - &z;
                let model = fz + gz.dot(&d) + 0.5 / step * d.norm_squared();
                if loss.value(&u) <= model + 1e-12 * model.abs().max(1.0) {
                    break;
                }
                step *= 0.5;
                u = svt(&(&z - &gz * step), step * lambda)?;
            }
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration: k + 1 });
        }
        let u_obj = convex_objective(loss, lambda, &u)?;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let accepted = u_obj <= x_obj;
        let (x_next, x_next_obj) = if accepted {
            (u.clone(), u_obj)
        } else {
            (x.clone(), x_obj)
        };
        let rel_change = (&x_next - &x).norm() / x.norm().max(1.0);
        z = &x_next + (&u - &x_next) * (t / t_next) + (&x_next - &x) * ((t - 1.0) / t_next);
        t = t_next;
        x = x_next;
        x_obj = x_next_obj;
        trace.push(ApgRecord {
            iter: k + 1,
            obj: x_obj,
            rel_change,
        });
        if accepted && rel_change <= config.epsilon {
            return Ok(ApgOutcome {
                x,
                trace,
                stop_reason: StopReason::Converged,
                iterations: k + 1,
                objective: x_obj,
            });
        }
    }
    Ok(ApgOutcome {
        x,
        trace,
        stop_reason: StopReason::IterationCap,
        iterations: config.max_iters,
        objective: x_obj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{numerical_rank, rect_diag, Vector};
    use crate::sampling::{generate_instance, NoiseSpec, OperatorSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn plain(eps: f64) -> AalConfig {
        AalConfig {
            schedule: Schedule::None,
            epsilon: eps,
            max_iters: 20_000,
            record_trace: true,
            ..AalConfig::default()
        }
    }

    #[test]
    fn spectral_start_is_balanced_best_approximation() {
        let inst = generate_instance(
            12,
            10,
            2,
            &OperatorSpec::FullObservation,
            &NoiseSpec::None,
            3,
        )
        .unwrap();
        let loss = LeastSquaresLoss::from_instance(&inst);
        let fp = init_spectral(&loss, 2).unwrap();
        assert!((fp.u.tr_mul(&fp.u) - fp.v.tr_mul(&fp.v)).norm() <= 1e-10 * fp.u.norm_squared());
        assert!((fp.product() - &inst.m_star).norm() <= 1e-10 * inst.m_star.norm());
        // rank-1 start is the Eckart-Young truncation
        let fp1 = init_spectral(&loss, 1).unwrap();
        let svd = thin_svd(&inst.m_star).unwrap();
        assert!(
            ((fp1.product() - &inst.m_star).norm() - svd.singulars[1]).abs()
                < 1e-9 * svd.singulars[0]
        );
        assert_eq!(init_spectral(&loss, 2).unwrap(), fp);
    }

    #[test]
    fn nesterov_recursion() {
        let (beta, next, clipped) = nesterov_beta(1.0, 1.0, 1.0);
        assert_eq!(beta, 0.0);
        assert!((next - 0.5 * (1.0 + 5f64.sqrt())).abs() < 1e-15);
        assert!(!clipped);
        let (beta, _, _) = nesterov_beta(1e8, 1e8 + 0.5, 1.0);
        assert!(beta > 0.999_999);
        assert!((beta_cap(3.0, 3.0) - 0.5f64.sqrt()).abs() < 1e-15);
        let (beta, _, clipped) = nesterov_beta(1e8, 1e8 + 0.5, beta_cap(1.0, 1.0));
        assert!(clipped && (beta - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn step_contracts_under_dominant_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = rand_mat(5, 5, &mut rng);
        let obj =
            RegularizedObjective::new(LeastSquaresLoss::full_observation(&m), 1e6, 2).unwrap();
        let fp = FactorPair::new(rand_mat(5, 2, &mut rng), rand_mat(5, 2, &mut rng)).unwrap();
        let next = aal_step(&obj, &fp, &fp, 0.0, 1.0);
        assert!(next.norm() < 1e-5 * fp.norm());
    }

    #[test]
    fn block_updates_solve_their_subproblems() {
        let inst = generate_instance(
            6,
            6,
            1,
            &OperatorSpec::gaussian(30),
            &NoiseSpec::Relative { ratio: 0.1 },
            4,
        )
        .unwrap();
        let obj = RegularizedObjective::from_instance(&inst, 0.05, 2).unwrap();
        let loss = &obj.loss;
        let start = init_spectral(loss, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prev = start.add_scaled(
            0.1,
            &FactorPair::new(rand_mat(6, 2, &mut rng), rand_mat(6, 2, &mut rng)).unwrap(),
        );
        let (beta, lf) = (0.3, auto_lf(&obj, &start));
        let next = aal_step(&obj, &start, &prev, beta, lf);
        let u_tilde = &start.u + (&start.u - &prev.u) * beta;
        let g1 = loss.gradient(&(&u_tilde * start.v.transpose())) * &start.v;
        // stationarity of the U model
        let model_grad = &g1 + (&next.u - &u_tilde) * lf + &next.u * obj.lambda;
        assert!(model_grad.norm() <= 1e-12 * (g1.norm() + lf * next.u.norm()));
        // dense least-squares oracle: minimize the model over vec(U) via normal equations
        let dim = 12;
        let mut h = Matrix::zeros(dim, dim);
        let mut rhs = Vector::zeros(dim);
        for i in 0..dim {
            h[(i, i)] = lf + obj.lambda;
            rhs[i] = lf * u_tilde.as_slice()[i] - g1.as_slice()[i];
        }
        let sol = h.lu().solve(&rhs).unwrap();
        let dense = Matrix::from_column_slice(6, 2, sol.as_slice());
        assert!((dense - &next.u).norm() <= 1e-12 * next.u.norm());
        let v_tilde = &start.v + (&start.v - &prev.v) * beta;
        let g2 = loss
            .gradient(&(&next.u * v_tilde.transpose()))
            .tr_mul(&next.u);
        let model_grad = &g2 + (&next.v - &v_tilde) * lf + &next.v * obj.lambda;
        assert!(model_grad.norm() <= 1e-12 * (g2.norm() + lf * next.v.norm()));
    }

    #[test]
    fn residuals_equal_partial_gradients_of_phi() {
        let inst = generate_instance(
            8,
            8,
            2,
            &OperatorSpec::gaussian(50),
            &NoiseSpec::Relative { ratio: 0.1 },
            6,
        )
        .unwrap();
        let obj = RegularizedObjective::from_instance(&inst, 0.05, 3).unwrap();
        let start = init_spectral(&obj.loss, 3).unwrap();
        let prev = start.scaled(0.9);
        let lf = auto_lf(&obj, &start);
        let step = full_step(&obj, &start, &prev, None, 0.4, lf, false);
        let g = obj.gradient(&step.next);
        assert!((step.res1 - g.u.norm()).abs() <= 1e-9 * g.u.norm().max(1e-12));
        assert!((step.res2 - g.v.norm()).abs() <= 1e-9 * g.v.norm().max(1e-12));
        assert_eq!(step.next, aal_step(&obj, &start, &prev, 0.4, lf));
    }

    #[test]
    fn lf_for_full_observation_and_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = rand_mat(6, 5, &mut rng);
        let obj =
            RegularizedObjective::new(LeastSquaresLoss::full_observation(&m), 0.1, 2).unwrap();
        let fp = FactorPair::new(rand_mat(6, 2, &mut rng), rand_mat(5, 2, &mut rng)).unwrap();
        let su = thin_svd(&fp.u).unwrap().singulars[0];
        let sv = thin_svd(&fp.v).unwrap().singulars[0];
        let lf = auto_lf(&obj, &fp);
        assert!((lf - 2.0 * su.max(sv).powi(2)).abs() <= 1e-8 * lf);
        let doubled = auto_lf(&obj, &fp.scaled(2.0));
        assert!((doubled - 4.0 * lf).abs() <= 1e-8 * doubled);
    }

    #[test]
    fn large_lambda_collapses_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = rand_mat(6, 6, &mut rng);
        let s1 = thin_svd(&m).unwrap().singulars[0];
        let obj =
            RegularizedObjective::new(LeastSquaresLoss::full_observation(&m), 1.1 * s1, 2).unwrap();
        let start = FactorPair::new(rand_mat(6, 2, &mut rng), rand_mat(6, 2, &mut rng)).unwrap();
        let out = aal_solve(&obj, &plain(1e-10), start).unwrap();
        assert_eq!(out.stop_reason, StopReason::Converged);
        assert!(out.fp.norm() < 1e-6);
        assert!((obj.value(&out.fp) - 0.5 * m.norm_squared()).abs() < 1e-10 * m.norm_squared());
    }

    #[test]
    fn diagonal_solution_matches_shrinkage() {
        let sigma = [4.0, 3.0, 1.5, 0.5];
        let m = rect_diag(4, 4, &sigma);
        let lambda = 0.5 * sigma[1];
        let obj =
            RegularizedObjective::new(LeastSquaresLoss::full_observation(&m), lambda, 2).unwrap();
        let start = init_spectral(&obj.loss, 2).unwrap();
        let out = aal_solve(&obj, &plain(1e-12), start).unwrap();
        let expected = rect_diag(4, 4, &[sigma[0] - lambda, sigma[1] - lambda, 0.0, 0.0]);
        assert!((out.fp.product() - &expected).norm() <= 1e-6 * expected.norm());
    }

    #[test]
    fn plain_schedule_descends() {
        for seed in 0..20 {
            let inst = generate_instance(
                10,
                8,
                2,
                &OperatorSpec::gaussian(60),
                &NoiseSpec::Relative { ratio: 0.1 },
                seed,
            )
            .unwrap();
            let obj = RegularizedObjective::from_instance(&inst, 0.02, 3).unwrap();
            let start = init_spectral(&obj.loss, 3).unwrap();
            let out = aal_solve(
                &obj,
                &AalConfig {
                    max_iters: 300,
                    ..plain(1e-9)
                },
                start.clone(),
            )
            .unwrap();
            let mut prev = obj.value(&start);
            for rec in &out.trace.records {
                assert!(
                    rec.obj <= prev + 1e-12 * prev.abs(),
                    "seed {seed} iter {}",
                    rec.iter
                );
                prev = rec.obj;
            }
        }
    }

    #[test]
    fn trace_distances_and_csv() {
        let inst = generate_instance(
            12,
            12,
            2,
            &OperatorSpec::FullObservation,
            &NoiseSpec::Relative { ratio: 0.1 },
            8,
        )
        .unwrap();
        let obj = RegularizedObjective::from_instance(&inst, 1.0, 2).unwrap();
        let start = init_spectral(&obj.loss, 2).unwrap();
        let out = aal_solve(&obj, &plain(1e-10), start.clone()).unwrap();
        let last = out.trace.records.last().unwrap();
        assert_eq!(last.dist_to_final, 0.0);
        assert!(out.trace.records.windows(2).all(|w| w[0].iter < w[1].iter));
        let csv = out.trace.to_csv();
        assert_eq!(csv.lines().count(), out.trace.records.len() + 1);
        assert_eq!(SolverTrace::from_csv(&csv).unwrap(), out.trace);
        let again = aal_solve(&obj, &plain(1e-10), start).unwrap();
        assert_eq!(again.trace.to_csv(), csv);
        // balanced limit, matching ranks
        let gram = out.fp.u.tr_mul(&out.fp.u);
        assert!((&gram - out.fp.v.tr_mul(&out.fp.v)).norm() <= 1e-6 * gram.norm());
        assert_eq!(
            numerical_rank(&out.fp.product(), 1e-6).unwrap(),
            numerical_rank(&out.fp.u, 1e-3).unwrap()
        );
    }

    #[test]
    fn iteration_cap_and_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = rand_mat(5, 5, &mut rng);
        let obj =
            RegularizedObjective::new(LeastSquaresLoss::full_observation(&m), 0.1, 2).unwrap();
        let start = init_spectral(&obj.loss, 2).unwrap();
        let out = aal_solve(
            &obj,
            &AalConfig {
                max_iters: 3,
                ..plain(1e-14)
            },
            start.clone(),
        )
        .unwrap();
        assert_eq!(out.stop_reason, StopReason::IterationCap);
        assert_eq!(out.iterations, 3);
        let mut bad = start.clone();
        bad.u[(0, 0)] = f64::NAN;
        let err = aal_solve(&obj, &plain(1e-8), bad).unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 1 }));
        let err = aal_solve(
            &obj,
            &AalConfig {
                schedule: Schedule::Fixed { beta: 0.9 },
                ..plain(1e-8)
            },
            start,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn backtracking_recovers_from_small_lf() {
        let inst = generate_instance(
            10,
            10,
            2,
            &OperatorSpec::FullObservation,
            &NoiseSpec::None,
            1,
        )
        .unwrap();
        let obj = RegularizedObjective::from_instance(&inst, 0.5, 2).unwrap();
        let start = init_spectral(&obj.loss, 2).unwrap();
        let config = AalConfig {
            lf: LfRule::Fixed { value: 1e-3 },
            backtracking: true,
            ..plain(1e-9)
        };
        let out = aal_solve(&obj, &config, start).unwrap();
        assert_eq!(out.stop_reason, StopReason::Converged);
        assert!(out.lf > 1e-3);
    }

    #[test]
    fn nesterov_converges_to_same_point() {
        let inst = generate_instance(
            12,
            12,
            2,
            &OperatorSpec::FullObservation,
            &NoiseSpec::Relative { ratio: 0.1 },
            2,
        )
        .unwrap();
        let obj = RegularizedObjective::from_instance(&inst, 1.0, 2).unwrap();
        let start = init_spectral(&obj.loss, 2).unwrap();
        let a = aal_solve(&obj, &plain(1e-11), start.clone()).unwrap();
        let b = aal_solve(
            &obj,
            &AalConfig {
                schedule: Schedule::Nesterov,
                ..plain(1e-11)
            },
            start,
        )
        .unwrap();
        assert!((a.fp.product() - b.fp.product()).norm() < 1e-8 * a.fp.product().norm());
    }

    #[test]
    fn svt_cases() {
        let z = rect_diag(2, 2, &[3.0, 1.0]);
        assert_eq!(svt(&z, 3.5).unwrap(), Matrix::zeros(2, 2));
        assert!((svt(&z, 0.0).unwrap() - &z).norm() < 1e-14);
        assert!((svt(&z, 2.0).unwrap() - rect_diag(2, 2, &[1.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn apg_full_observation_matches_prox() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = rand_mat(8, 6, &mut rng) * 3.0;
        let loss = LeastSquaresLoss::full_observation(&m);
        let lambda = 1.0;
        let out = apg_nuclear(
            &loss,
            lambda,
            &ApgConfig {
                epsilon: 1e-12,
                ..ApgConfig::default()
            },
        )
        .unwrap();
        let exact = svt(&m, lambda).unwrap();
        assert!((out.x - exact).norm() <= 1e-8);
        let s1 = thin_svd(&m).unwrap().singulars[0];
        let zero = apg_nuclear(&loss, s1 * 1.01, &ApgConfig::default()).unwrap();
        assert_eq!(zero.x, Matrix::zeros(8, 6));
    }

    #[test]
    fn apg_objective_monotone() {
        let inst = generate_instance(
            10,
            10,
            2,
            &OperatorSpec::gaussian(80),
            &NoiseSpec::Relative { ratio: 0.1 },
            5,
        )
        .unwrap();
        let loss = LeastSquaresLoss::from_instance(&inst);
        let lambda = 2.0 * inst.noise_adjoint_norm();
        let out = apg_nuclear(
            &loss,
            lambda,
            &ApgConfig {
                epsilon: 1e-10,
                ..ApgConfig::default()
            },
        )
        .unwrap();
        assert!(out.trace.windows(2).all(|w| w[1].obj <= w[0].obj));
    }
}
