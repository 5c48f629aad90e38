//! Numerical audits of the recovery guarantees: error-bound constants and
//! inequality chains at critical points, balance and rank structure, the
//! full-observation global minimizers, KL-modulus probes, calmness estimates,
//! the KL counterexample and convex/factored equivalence.
//!
//! Every audit returns [`Check`] values. A check whose premises could not be
//! verified is `not-applicable`, never `pass`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::matrix::{
    nuclear_norm, numerical_rank, procrustes, singular_values, spectral_norm, sym_eigenvalues,
    thin_svd, FactorPair, Matrix, DEFAULT_RANK_TOL,
};
use crate::objective::{
    curvature_gap, xi_from_gradient, DiagonalObjective, HessianProbe, LeastSquaresLoss,
    RegularizedObjective, SmoothLoss, DISTINCT_TOL,
};
use crate::sampling::{RecoveryInstance, SamplingOperator, SpectrumEstimate, SpectrumMethod};
use crate::solvers::{AalOutcome, ApgOutcome, StopReason};

/// Gradient gate for "critical point": `||grad Phi||_F <= CRITICAL_TOL * grad_scale * (1 + ||y||)`.
pub const CRITICAL_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Premise {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

impl Premise {
    pub fn new(name: &str, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ok,
            detail: detail.into(),
        }
    }
}

/// One audited claim `lhs <= rhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: String,
    #[serde(deserialize_with = "null_as_nan")]
    pub lhs: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub rhs: f64,
    /// `rhs - lhs`.
    #[serde(deserialize_with = "null_as_nan")]
    pub margin: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
    pub premises_verified: bool,
    pub premises: Vec<Premise>,
    pub notes: Vec<String>,
    /// Auxiliary measurements (moduli estimates, slopes, residuals).
    #[serde(deserialize_with = "null_map_as_nan")]
    pub values: BTreeMap<String, f64>,
}

// JSON has no NaN; serde_json writes it as null.
fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn null_map_as_nan<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<BTreeMap<String, f64>, D::Error> {
    let raw = BTreeMap::<String, Option<f64>>::deserialize(d)?;
    Ok(raw
        .into_iter()
        .map(|(k, v)| (k, v.unwrap_or(f64::NAN)))
        .collect())
}

impl Check {
    /// Pass iff every premise holds and `rhs - lhs >= -tolerance`.
    pub fn new(id: &str, lhs: f64, rhs: f64, tolerance: f64, premises: Vec<Premise>) -> Self {
        let premises_verified = premises.iter().all(|p| p.ok);
        let margin = rhs - lhs;
        let verdict = if !premises_verified {
            Verdict::NotApplicable
        } else if margin >= -tolerance {
            // +inf (finite lhs, infinite rhs) passes; NaN fails
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        Self {
            id: id.into(),
            lhs,
            rhs,
            margin,
            tolerance,
            verdict,
            premises_verified,
            premises,
            notes: Vec::new(),
            values: BTreeMap::new(),
        }
    }

    pub fn not_applicable(id: &str, premises: Vec<Premise>, note: &str) -> Self {
        let mut c = Self::new(id, f64::NAN, f64::NAN, 0.0, premises);
        c.verdict = Verdict::NotApplicable;
        c.premises_verified = false;
        c.notes.push(note.into());
        c
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    pub fn with_value(mut self, key: &str, value: f64) -> Self {
        self.values.insert(key.into(), value);
        self
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub version: String,
    pub config_hash: String,
    pub checks: Vec<Check>,
}

impl TheoryReport {
    pub fn new(config_hash: &str) -> Self {
        Self {
            version: crate::VERSION.into(),
            config_hash: config_hash.into(),
            checks: Vec::new(),
        }
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn extend(&mut self, checks: impl IntoIterator<Item = Check>) {
        self.checks.extend(checks);
    }

    pub fn get(&self, id: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.id == id)
    }

    /// No applicable check failed.
    pub fn all_applicable_pass(&self) -> bool {
        self.checks.iter().all(|c| c.verdict != Verdict::Fail)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

// ---------------------------------------------------------------------------
// error-bound constants

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaConstants {
    pub alpha: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// `gamma2 / gamma1`, present only when admissible.
    pub gamma_hat: Option<f64>,
    pub admissible: bool,
}

/// Largest moduli ratio `beta / alpha` for which the error bound is claimed.
pub const MAX_MODULI_RATIO: f64 = 1.38;

pub fn gamma_hat(alpha: f64, beta: f64) -> Result<GammaConstants> {
    if !(alpha > 0.0) || !(beta >= alpha) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need 0 < alpha <= beta, got alpha = {alpha}, beta = {beta}"
        )));
    }
    let c = 7.0 + 2f64.sqrt();
    let sum2 = (alpha + beta).powi(2);
    let diff2 = (beta - alpha).powi(2);
    let gamma1 = 63.0 * alpha / (128.0 * beta) - 0.125 - 16.0 * c * diff2 / (15.0 * sum2);
    let gamma2 = 2048.0 * c / (15.0 * sum2) + 64.0 / (alpha * beta);
    let admissible = beta / alpha <= MAX_MODULI_RATIO && gamma1 > 0.0;
    Ok(GammaConstants {
        alpha,
        beta,
        gamma1,
        gamma2,
        gamma_hat: admissible.then(|| gamma2 / gamma1),
        admissible,
    })
}

/// Balanced factors `(P sqrt(S), Q sqrt(S))` of the top-`r` SVD of `m`.
pub fn truth_factors(m: &Matrix, r: usize) -> Result<FactorPair> {
    let svd = thin_svd(m)?.truncate(r);
    let mut u = svd.left;
    let mut v = svd.right;
    for j in 0..svd.singulars.len() {
        let s = svd.singulars[j].sqrt();
        u.column_mut(j).scale_mut(s);
        v.column_mut(j).scale_mut(s);
    }
    FactorPair::new(u, v)
}

fn spectrum_premise(spectrum: &SpectrumEstimate) -> Premise {
    let certified = spectrum.is_exact() || spectrum.method == SpectrumMethod::Supplied;
    Premise::new(
        "restricted-moduli-certified",
        certified,
        format!(
            "{:?} (alpha = {}, beta = {})",
            spectrum.method, spectrum.alpha, spectrum.beta
        ),
    )
}

/// Everything the critical-point audits share.
struct CriticalContext {
    obj: RegularizedObjective,
    w: Matrix,
    w_star: Matrix,
    x: Matrix,
    m_star: Matrix,
    /// `Xi(M*)`.
    xi_star: Matrix,
    /// `W W^T - W* W*^T`.
    gram_gap: Matrix,
    grad_norm: f64,
    alpha: f64,
    beta: f64,
    r_star: usize,
    premises: Vec<Premise>,
}

fn critical_context(
    inst: &RecoveryInstance,
    fp: &FactorPair,
    lambda: f64,
    spectrum: &SpectrumEstimate,
) -> Result<CriticalContext> {
    let obj = RegularizedObjective::from_instance(inst, lambda, fp.rank())?;
    let x = fp.product();
    let grad_norm = obj.gradient_norm(fp);
    let gate = CRITICAL_TOL * obj.loss.residual_normalizer();
    let rank = numerical_rank(&x, DEFAULT_RANK_TOL)?;
    let (alpha, beta) = spectrum.hessian_moduli(obj.loss.scale);
    let truth = truth_factors(&inst.m_star, inst.r_star)?;
    let w = fp.stack();
    let w_star = truth.stack();
    let gram_gap = &w * w.transpose() - &w_star * w_star.transpose();
    let xi_star = xi_from_gradient(&obj.loss.gradient(&inst.m_star), lambda);
    let premises = vec![
        Premise::new(
            "critical-point",
            grad_norm <= gate,
            format!("||grad Phi|| = {grad_norm:.3e}, gate {gate:.3e}"),
        ),
        Premise::new(
            "rank-at-most-r*",
            rank <= inst.r_star,
            format!("numerical rank {rank}, r* = {}", inst.r_star),
        ),
        spectrum_premise(spectrum),
    ];
    Ok(CriticalContext {
        obj,
        w,
        w_star,
        x,
        m_star: inst.m_star.clone(),
        xi_star,
        gram_gap,
        grad_norm,
        alpha,
        beta,
        r_star: inst.r_star,
        premises,
    })
}

/// PSD premise from a Lanczos probe (computed when not supplied).
fn psd_premise(
    obj: &RegularizedObjective,
    fp: &FactorPair,
    probe: Option<&HessianProbe>,
) -> (Premise, f64) {
    let owned;
    let probe = match probe {
        Some(p) => p,
        None => {
            owned = obj.min_eig_hessian(fp, 1e-9);
            &owned
        }
    };
    (
        Premise::new(
            "psd-hessian",
            probe.is_psd() && probe.converged,
            format!(
                "min eig {:.3e} vs threshold {:.3e} (converged: {})",
                probe.value, probe.psd_threshold, probe.converged
            ),
        ),
        probe.value,
    )
}

/// Orthonormal basis of `col(w)` from its thin SVD (rank cut at `sqrt(DEFAULT_RANK_TOL)`).
fn column_basis(w: &Matrix) -> Result<Matrix> {
    let svd = thin_svd(w)?;
    let k = svd.rank(DEFAULT_RANK_TOL.sqrt());
    Ok(svd.left.columns(0, k).into_owned())
}

/// The three inequalities of the error-bound chain plus the final bound
/// `2 gamma_hat r* (lambda^2 + ||grad f(M*)||^2)`.
pub fn error_bound_audit(
    inst: &RecoveryInstance,
    fp: &FactorPair,
    lambda: f64,
    spectrum: &SpectrumEstimate,
    psd: Option<&HessianProbe>,
) -> Result<Vec<Check>> {
    let ctx = critical_context(inst, fp, lambda, spectrum)?;
    let (psd_p, min_eig) = psd_premise(&ctx.obj, fp, psd);
    let consts = gamma_hat(ctx.alpha, ctx.beta)?;
    let mut premises = ctx.premises.clone();
    premises.push(psd_p);
    premises.push(Premise::new(
        "moduli-admissible",
        consts.admissible,
        format!(
            "beta/alpha = {:.4}, gamma1 = {:.4e}",
            ctx.beta / ctx.alpha,
            consts.gamma1
        ),
    ));
    let ids = [
        "error-bound.lower",
        "error-bound.middle",
        "error-bound.xi",
        "error-bound.final",
    ];
    let Some(gh) = consts.gamma_hat else {
        return Ok(ids
            .iter()
            .map(|id| {
                Check::not_applicable(id, premises.clone(), "inadmissible restricted spectrum")
            })
            .collect());
    };
    let err_sq = (&ctx.x - &ctx.m_star).norm_squared();
    let gap_sq = ctx.gram_gap.norm_squared();
    let xi_norm = lambda + spectral_norm(&ctx.obj.loss.gradient(&ctx.m_star), 1e-12);
    let noise = spectral_norm(&ctx.obj.loss.gradient(&ctx.m_star), 1e-12);
    let final_rhs = 2.0 * gh * ctx.r_star as f64 * (lambda * lambda + noise * noise);
    let tol = |a: f64, b: f64| 1e-8 * (a.abs() + b.abs());
    let annotate = |c: Check| {
        c.with_value("gamma_hat", gh)
            .with_value("xi_star_norm", xi_norm)
            .with_value("grad_f_star_norm", noise)
            .with_value("min_hessian_eig", min_eig)
            .with_value("grad_norm", ctx.grad_norm)
    };
    Ok(vec![
        annotate(Check::new(
            ids[0],
            2.0 * err_sq,
            gap_sq,
            tol(err_sq, gap_sq),
            premises.clone(),
        )),
        annotate(Check::new(
            ids[1],
            gap_sq,
            gh * xi_norm * xi_norm,
            tol(gap_sq, gh * xi_norm * xi_norm),
            premises.clone(),
        )),
        annotate(Check::new(
            ids[2],
            gh * xi_norm * xi_norm,
            final_rhs,
            tol(final_rhs, 0.0),
            premises.clone(),
        )),
        annotate(
            Check::new(ids[3], gap_sq, final_rhs, tol(gap_sq, final_rhs), premises)
                .with_value("recovery_error", err_sq.sqrt()),
        ),
    ])
}

/// The first-order inequality at a low-rank critical point and its
/// lower-bound form with `Gamma = (W W^T - W* W*^T) Q Q^T`.
pub fn deviation_bound_audit(
    inst: &RecoveryInstance,
    fp: &FactorPair,
    lambda: f64,
    spectrum: &SpectrumEstimate,
) -> Result<Vec<Check>> {
    let ctx = critical_context(inst, fp, lambda, spectrum)?;
    let q = column_basis(&ctx.w)?;
    let gamma = &ctx.gram_gap * &q * q.transpose();
    let (a, b) = (ctx.alpha, ctx.beta);
    let g_norm = gamma.norm();
    let err = (&ctx.x - &ctx.m_star).norm();
    let quad = 0.5 * gamma.norm_squared();
    let cross = 2.0 / (a + b) * ctx.xi_star.dot(&gamma);
    let main_rhs = (b - a) / (a + b) * err * g_norm;
    // the inequality uses Xi(X) W = 0; a residual gradient leaves an error of order ||grad Phi|| ||W||^2
    let slack = 10.0
        * ctx.grad_norm
        * (ctx.w.norm() + ctx.w_star.norm()).powi(2).max(1.0).sqrt()
        * (1.0 + 2.0 / (a + b));
    let main = Check::new(
        "deviation-bound.main",
        quad + cross,
        main_rhs,
        1e-8 * (quad.abs() + cross.abs() + main_rhs.abs()) + slack,
        ctx.premises.clone(),
    )
    .with_value("gamma_norm", g_norm)
    .with_value("basis_rank", q.ncols() as f64)
    .with_value("criticality_slack", slack);

    let xi_spec = sym_eigenvalues(&ctx.xi_star)
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let lhs = 15.0 / 64.0 * gamma.norm_squared();
    let rhs = 64.0 * ctx.r_star as f64 / (a + b).powi(2) * xi_spec * xi_spec
        + (b - a).powi(2) / (2.0 * (a + b).powi(2)) * ctx.gram_gap.norm_squared();
    let fcond = Check::new(
        "deviation-bound.lower-bound-form",
        lhs,
        rhs,
        1e-8 * (lhs.abs() + rhs.abs()) + slack,
        ctx.premises,
    )
    .with_value("xi_star_norm", xi_spec);
    Ok(vec![main, fcond])
}

/// Curvature identity and lower bound along `Delta = W - [W* 0] R*`, and the
/// PSD property of `W^T [W* 0] R*`.
pub fn critical_identity_audit(
    inst: &RecoveryInstance,
    fp: &FactorPair,
    lambda: f64,
    spectrum: &SpectrumEstimate,
    psd: Option<&HessianProbe>,
) -> Result<Vec<Check>> {
    let ctx = critical_context(inst, fp, lambda, spectrum)?;
    let (n, _) = fp.rows();
    let r = fp.rank();
    if ctx.r_star > r {
        return Ok(vec![Check::not_applicable(
            "critical-identity.equality",
            ctx.premises,
            "factor rank r below r*; [W* 0] is undefined",
        )]);
    }
    let mut padded = Matrix::zeros(ctx.w.nrows(), r);
    padded.columns_mut(0, ctx.r_star).copy_from(&ctx.w_star);
    let rot = procrustes(&ctx.w, &padded)?.rotation;
    let aligned = &padded * &rot;
    let delta = FactorPair::from_stacked(&(&ctx.w - &aligned), n);

    // identity: both sides evaluated from independent formulas
    let hess = ctx.obj.hess_quadform(fp, &delta);
    let s = &fp.u * delta.v.transpose() + &delta.u * fp.v.transpose();
    let curv = ctx.obj.loss.hessian_quadform(&ctx.x, &s);
    let xi_x = ctx.obj.xi_matrix(&ctx.x);
    let inner = xi_x.dot(&ctx.gram_gap);
    let scale = hess.abs() + curv.abs() + inner.abs();
    let resid = if scale > 0.0 {
        (hess - (curv - inner)).abs() / scale
    } else {
        0.0
    };
    let equality = Check::new("critical-identity.equality", resid, 1e-8, 0.0, ctx.premises.clone())
        .with_value("hessian_along_delta", hess)
        .with_value("curvature_term", curv)
        .with_value("xi_term", inner);

    let (psd_p, min_eig) = psd_premise(&ctx.obj, fp, psd);
    let mut ineq_premises = ctx.premises.clone();
    ineq_premises.push(psd_p);
    let (a, b) = (ctx.alpha, ctx.beta);
    let bound =
        (a / (2.0 * b) * ctx.gram_gap.norm_squared() + ctx.xi_star.dot(&ctx.gram_gap) / b).max(0.0);
    let wd = (&ctx.w * delta.stack().transpose()).norm_squared();
    let slack =
        10.0 * ctx.grad_norm * (ctx.w.norm() + ctx.w_star.norm()).powi(2).max(1.0).sqrt() / b;
    let ineq = Check::new(
        "critical-identity.inequality",
        bound,
        wd,
        1e-8 * (bound + wd) + slack,
        ineq_premises,
    )
    .with_value("min_hessian_eig", min_eig);

    let cross = ctx.w.transpose() * &aligned;
    let asym = (&cross - cross.transpose()).norm();
    let sym = (&cross + cross.transpose()) * 0.5;
    let min_eig_cross = sym_eigenvalues(&sym)
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let psd_check = Check::new(
        "critical-identity.aligned-cross-psd",
        -min_eig_cross,
        1e-10,
        0.0,
        Vec::new(),
    )
    .with_value("asymmetry", asym)
    .with_value("min_eig", min_eig_cross);
    let psd_check = if asym > 1e-10 * cross.norm().max(1.0) {
        let mut c = psd_check;
        c.verdict = Verdict::Fail;
        c.with_note("cross term is not symmetric")
    } else {
        psd_check
    };
    Ok(vec![equality, ineq, psd_check])
}

/// Balance `U^T U = V^T V`, the rank chain and `sigma(W) = sqrt(2) sigma(V)`.
/// Passes when the relative balance residual is at most `1e-6` and all four
/// numerical ranks agree.
pub fn balance_audit(fp: &FactorPair) -> Result<Check> {
    let gu = fp.u.tr_mul(&fp.u);
    let gv = fp.v.tr_mul(&fp.v);
    let abs = (&gu - &gv).norm();
    let rel = if gu.norm() > 0.0 {
        abs / gu.norm()
    } else {
        abs
    };
    let tau = DEFAULT_RANK_TOL;
    let rx = numerical_rank(&fp.product(), tau)?;
    let ru = numerical_rank(&fp.u, tau.sqrt())?;
    let rv = numerical_rank(&fp.v, tau.sqrt())?;
    let rw = numerical_rank(&fp.stack(), tau.sqrt())?;
    let sw = singular_values(&fp.stack())?;
    let sv = singular_values(&fp.v)?;
    let sigma_gap = sw
        .iter()
        .zip(sv.iter())
        .map(|(a, b)| (a - 2f64.sqrt() * b).abs())
        .fold(0.0, f64::max);
    let agree = rx == ru && ru == rv && rv == rw;
    let mut c = Check::new("balance", rel, 1e-6, 0.0, Vec::new())
        .with_value("balance_abs", abs)
        .with_value("balance_rel", rel)
        .with_value("rank_x", rx as f64)
        .with_value("rank_u", ru as f64)
        .with_value("rank_v", rv as f64)
        .with_value("rank_w", rw as f64)
        .with_value("sigma_w_gap", sigma_gap);
    if !agree {
        c.verdict = Verdict::Fail;
        c.notes
            .push(format!("ranks disagree: X {rx}, U {ru}, V {rv}, W {rw}"));
    }
    Ok(c)
}

/// Residuals of the critical-set description for `f = (1/2)||X - D||^2`:
/// `U1 = V1`, `U2 = 0`, `V2 = 0`, `(U1 U1^T - D1 + lambda I) U1 = 0`,
/// where the first `r_star` rows form block 1. Requires `lambda > d_{r*+1}`.
pub fn diag_critical_audit(
    diag: &DiagonalObjective,
    fp: &FactorPair,
    r_star: usize,
) -> Result<Check> {
    let lambda = diag.lambda;
    let premises = vec![
        Premise::new(
            "lambda-above-d_{r*+1}",
            lambda > diag.sigma_at(r_star + 1),
            format!(
                "lambda = {lambda}, d_(r*+1) = {}",
                diag.sigma_at(r_star + 1)
            ),
        ),
        Premise::new(
            "d_{r*}-positive",
            r_star >= 1 && diag.sigma_at(r_star) > 0.0,
            format!("d_(r*) = {}", diag.sigma_at(r_star)),
        ),
    ];
    if premises.iter().any(|p| !p.ok) {
        return Ok(Check::not_applicable(
            "diag-critical",
            premises,
            "characterization needs lambda > d_(r*+1) and d_(r*) > 0",
        ));
    }
    let (n, m) = fp.rows();
    let r = fp.rank();
    let u1 = fp.u.rows(0, r_star).into_owned();
    let v1 = fp.v.rows(0, r_star).into_owned();
    let u2 = fp.u.rows(r_star, n - r_star).norm();
    let v2 = fp.v.rows(r_star, m - r_star).norm();
    let d1 = Matrix::from_diagonal(&crate::matrix::Vector::from_fn(r_star, |i, _| {
        diag.sigma[i]
    }));
    let eq = (&u1 * u1.transpose() - d1 + Matrix::identity(r_star, r_star) * lambda) * &u1;
    let residuals = [(&u1 - &v1).norm(), u2, v2, eq.norm()];
    let worst = residuals.iter().copied().fold(0.0, f64::max);
    let _ = r;
    Ok(Check::new(
        "diag-critical",
        worst,
        1e-6 * (1.0 + fp.u.norm()),
        0.0,
        premises,
    )
    .with_value("u1_minus_v1", residuals[0])
    .with_value("u2", residuals[1])
    .with_value("v2", residuals[2])
    .with_value("stationarity", residuals[3]))
}

/// Representative global minimizer (`P = I`, `R = I`) of the diagonal
/// objective and its optimal value
/// `(1/2)||z - s||^2 + lambda ||z||_1 + (1/2) sum_{i>r} sigma_i^2`, `z = (s - lambda)_+`.
pub fn global_set_fullobs(diag: &DiagonalObjective) -> Result<(FactorPair, f64)> {
    let r = diag.r;
    if !(diag.sigma_at(r) > diag.sigma_at(r + 1)) {
        return Err(Error::InvalidArgument(format!(
            "need sigma_r > sigma_(r+1); got {} and {} (ties make the solution set larger)",
            diag.sigma_at(r),
            diag.sigma_at(r + 1)
        )));
    }
    let lambda = diag.lambda;
    let mut u = Matrix::zeros(diag.n, r);
    let mut v = Matrix::zeros(diag.m, r);
    let mut value = 0.0;
    for i in 0..r {
        let s = diag.sigma[i];
        let z = (s - lambda).max(0.0);
        u[(i, i)] = z.sqrt();
        v[(i, i)] = z.sqrt();
        value += 0.5 * (z - s).powi(2) + lambda * z;
    }
    value += 0.5 * diag.sigma[r..].iter().map(|s| s * s).sum::<f64>();
    Ok((FactorPair::new(u, v)?, value))
}

// ---------------------------------------------------------------------------
// KL probes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterKind {
    /// Validated against the closed-form optimal value.
    GlobalMinimizer,
    /// Validated only by a vanishing gradient.
    CriticalPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlProbeConfig {
    pub samples: usize,
    pub seed: u64,
    /// Ball radius; defaults to the admissible radius for the gap class.
    pub radius: Option<f64>,
    pub center_kind: CenterKind,
}

impl Default for KlProbeConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            seed: 0,
            radius: None,
            center_kind: CenterKind::GlobalMinimizer,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KlProbe {
    pub check: Check,
    /// Smallest `||grad||^2 / gap` over samples with positive gap.
    pub eta_hat: f64,
    pub gap_class: usize,
    pub delta: f64,
    pub positive_samples: usize,
    pub ratios: Vec<f64>,
}

/// Index `k` with `lambda` in `(s_{k+1}, s_k)` over the distinct leading
/// values, or `None` when `lambda` sits on one of them.
pub fn gap_class(diag: &DiagonalObjective) -> Option<usize> {
    let distinct = diag.distinct_top();
    let margin = DISTINCT_TOL * distinct.first().copied().unwrap_or(0.0);
    if distinct.iter().any(|s| (s - diag.lambda).abs() <= margin) {
        return None;
    }
    Some(distinct.iter().filter(|s| **s > diag.lambda).count())
}

/// Admissible ball radius for gap class `k`:
/// `min{sqrt(s_k - lambda)/2, (lambda - s_{k+1})/(2 sqrt(s_1)), (s_s - sigma_{r+1})/(4 sqrt(s_1))}`
/// with `s_0 = inf`, `s_{s+1} = 0`; the last term is dropped when `lambda > sigma_r`.
pub fn kl_radius(diag: &DiagonalObjective, k: usize) -> f64 {
    let distinct = diag.distinct_top();
    let s = distinct.len();
    let lambda = diag.lambda;
    let top = distinct[0];
    let at = |j: usize| -> f64 {
        if j == 0 {
            f64::INFINITY
        } else if j > s {
            0.0
        } else {
            distinct[j - 1]
        }
    };
    let t1 = if k == 0 {
        f64::INFINITY
    } else {
        (at(k) - lambda).sqrt() / 2.0
    };
    let t2 = (lambda - at(k + 1)) / (2.0 * top.sqrt());
    let t3 = if lambda > diag.sigma_at(diag.r) {
        f64::INFINITY
    } else {
        (distinct[s - 1] - diag.sigma_at(diag.r + 1)) / (4.0 * top.sqrt())
    };
    t1.min(t2).min(t3)
}

/// Uniform sample from the ball of `radius` around `center`.
fn ball_point(center: &FactorPair, radius: f64, seed: u64) -> FactorPair {
    let (n, m) = center.rows();
    let r = center.rank();
    let dim = (n + m) * r;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir = crate::matrix::Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    dir /= norm;
    let u: f64 = rng.random();
    let rho = radius * u.powf(1.0 / dim as f64);
    center.add_scaled(rho, &FactorPair::from_flat(&dir, n, m, r))
}

/// Samples the ball around `center` and reports the smallest
/// `||grad Phi~||^2 / (Phi~ - Phi~(center))` over points with positive gap.
/// Passes when the ratio stays at least `1e-8 lambda`.
pub fn kl_probe(
    diag: &DiagonalObjective,
    center: &FactorPair,
    config: &KlProbeConfig,
) -> Result<KlProbe> {
    let obj = diag.objective();
    let lambda = diag.lambda;
    let mut premises = Vec::new();
    let class = gap_class(diag);
    premises.push(Premise::new(
        "lambda-inside-gap",
        class.is_some(),
        format!(
            "distinct leading values {:?}, lambda = {lambda}",
            diag.distinct_top()
        ),
    ));
    premises.push(Premise::new(
        "sigma_r-above-sigma_(r+1)",
        diag.sigma_at(diag.r) > diag.sigma_at(diag.r + 1),
        format!("{} vs {}", diag.sigma_at(diag.r), diag.sigma_at(diag.r + 1)),
    ));
    let grad = obj.gradient_norm(center);
    let scale = 1.0 + diag.sigma_matrix().norm();
    match config.center_kind {
        CenterKind::GlobalMinimizer => {
            let value = obj.value(center);
            let ok = match global_set_fullobs(diag) {
                Ok((_, opt)) => (value - opt).abs() <= 1e-8 * opt.abs().max(1.0),
                Err(_) => false,
            };
            premises.push(Premise::new(
                "center-globally-optimal",
                ok,
                format!("Phi~(center) = {value}"),
            ));
        }
        CenterKind::CriticalPoint => premises.push(Premise::new(
            "center-critical",
            grad <= CRITICAL_TOL * scale,
            format!("||grad|| = {grad:.3e}"),
        )),
    }
    let Some(k) = class else {
        return Ok(KlProbe {
            check: Check::not_applicable(
                "kl-probe",
                premises,
                "lambda on a distinct singular value",
            ),
            eta_hat: f64::NAN,
            gap_class: usize::MAX,
            delta: f64::NAN,
            positive_samples: 0,
            ratios: Vec::new(),
        });
    };
    let delta = kl_radius(diag, k);
    let radius = config.radius.unwrap_or(delta);
    let mut ratios = Vec::new();
    for t in 0..config.samples {
        let p = ball_point(center, radius, derive_seed(config.seed, t as u64));
        let gap = obj.gap_from(center, &p);
        if gap > 0.0 {
            let g = obj.gradient_near(center, &p).norm_squared();
            ratios.push(g / gap);
        }
    }
    let eta_hat = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let positive = ratios.len();
    let mut check = Check::new("kl-probe", 1e-8 * lambda, eta_hat, 0.0, premises)
        .with_value("eta_hat", eta_hat)
        .with_value("gap_class", k as f64)
        .with_value("delta", delta)
        .with_value("radius", radius)
        .with_value("positive_samples", positive as f64)
        .with_value("samples", config.samples as f64);
    if positive == 0 && check.verdict == Verdict::Pass {
        check.verdict = Verdict::Fail;
        check
            .notes
            .push("no sampled point had a positive gap".into());
    }
    if radius > delta {
        check
            .notes
            .push(format!("radius {radius} exceeds the admissible {delta}"));
    }
    Ok(KlProbe {
        check,
        eta_hat,
        gap_class: k,
        delta,
        positive_samples: positive,
        ratios,
    })
}

// ---------------------------------------------------------------------------
// counterexample

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexamplePoint {
    pub k: usize,
    pub gap: f64,
    pub grad_sq: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Residual standard error.
    pub std_error: f64,
    pub points: usize,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn line_fit(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len().min(y.len());
    let nf = n as f64;
    let mx = x[..n].iter().sum::<f64>() / nf;
    let my = y[..n].iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = (0..n)
        .map(|i| (y[i] - slope * x[i] - intercept).powi(2))
        .sum();
    LineFit {
        slope,
        intercept,
        r_squared: if syy > 0.0 { 1.0 - sse / syy } else { 1.0 },
        std_error: if n > 2 {
            (sse / (nf - 2.0)).sqrt()
        } else {
            0.0
        },
        points: n,
    }
}

/// Log-log fit of `values` against `ks`.
pub fn loglog_fit(ks: &[f64], values: &[f64]) -> LineFit {
    let x: Vec<f64> = ks.iter().map(|k| k.ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    line_fit(&x, &y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub a: f64,
    pub lambda: f64,
    pub k_max: usize,
    pub base_value: f64,
    pub base_value_formula: f64,
    pub points: Vec<CounterexamplePoint>,
    pub gap_fit: LineFit,
    pub grad_fit: LineFit,
    pub checks: Vec<Check>,
}

/// `Sigma = a I_2`, base point `U1 = V1 = Diag(0, sqrt(d))`, `d = a - lambda`.
pub fn counterexample_objective(a: f64, lambda: f64) -> Result<(DiagonalObjective, FactorPair)> {
    if !(lambda > 0.0 && lambda < a) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < lambda < a, got a = {a}, lambda = {lambda}"
        )));
    }
    let diag = DiagonalObjective::new(2, 2, vec![a, a], lambda, 2)?;
    let d = a - lambda;
    let base = crate::matrix::rect_diag(2, 2, &[0.0, d.sqrt()]);
    Ok((diag, FactorPair::new(base.clone(), base)?))
}

/// `U1^k = V1^k = [[0, 1/k^2], [1/k^2, sqrt(d) + 1/k^4]]`.
pub fn counterexample_point(a: f64, lambda: f64, k: usize) -> FactorPair {
    let d = a - lambda;
    let kf = k as f64;
    let e = 1.0 / (kf * kf);
    let u = Matrix::from_row_slice(2, 2, &[0.0, e, e, d.sqrt() + e * e]);
    FactorPair { u: u.clone(), v: u }
}

/// Gaps, squared gradients and their ratios along the sequence for
/// `k = 1..=k_max`, with log-log slopes over `k in [k_max/10, k_max]`.
pub fn counterexample_sequence(a: f64, lambda: f64, k_max: usize) -> Result<CounterexampleReport> {
    if k_max < 20 {
        return Err(Error::InvalidArgument(format!("k_max = {k_max} < 20")));
    }
    let (diag, base) = counterexample_objective(a, lambda)?;
    let obj = diag.objective();
    let mut points = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let p = counterexample_point(a, lambda, k);
        let gap = obj.gap_from(&base, &p);
        let grad_sq = obj.gradient_near(&base, &p).norm_squared();
        points.push(CounterexamplePoint {
            k,
            gap,
            grad_sq,
            ratio: grad_sq / gap,
        });
    }
    let window: Vec<&CounterexamplePoint> = points.iter().filter(|p| p.k >= k_max / 10).collect();
    let ks: Vec<f64> = window.iter().map(|p| p.k as f64).collect();
    let gap_fit = loglog_fit(&ks, &window.iter().map(|p| p.gap).collect::<Vec<_>>());
    let grad_fit = loglog_fit(&ks, &window.iter().map(|p| p.grad_sq).collect::<Vec<_>>());
    let base_value = obj.value(&base);
    let formula = (a * a + lambda * lambda) / 2.0 + lambda * (a - lambda);
    let increases = points
        .windows(2)
        .filter(|w| w[0].k >= 5 && !(w[1].ratio < w[0].ratio))
        .count();
    let nonpositive = points.iter().filter(|p| !(p.gap > 0.0)).count();
    let checks = vec![
        Check::new(
            "counterexample.gap-slope",
            (gap_fit.slope + 4.0).abs(),
            0.2,
            0.0,
            Vec::new(),
        )
        .with_value("slope", gap_fit.slope)
        .with_value("std_error", gap_fit.std_error),
        Check::new(
            "counterexample.grad-slope",
            (grad_fit.slope + 8.0).abs(),
            0.3,
            0.0,
            Vec::new(),
        )
        .with_value("slope", grad_fit.slope)
        .with_value("std_error", grad_fit.std_error),
        Check::new(
            "counterexample.ratio-decreasing",
            increases as f64,
            0.0,
            0.0,
            Vec::new(),
        )
        .with_value("last_ratio", points.last().map_or(f64::NAN, |p| p.ratio))
        .with_note("count of k >= 5 where the ratio fails to decrease"),
        Check::new(
            "counterexample.positive-gap",
            nonpositive as f64,
            0.0,
            0.0,
            Vec::new(),
        ),
        Check::new(
            "counterexample.base-value",
            (base_value - formula).abs(),
            1e-12 * formula.abs(),
            0.0,
            Vec::new(),
        ),
    ];
    Ok(CounterexampleReport {
        a,
        lambda,
        k_max,
        base_value,
        base_value_formula: formula,
        points,
        gap_fit,
        grad_fit,
        checks,
    })
}

// ---------------------------------------------------------------------------
// calmness

/// `2c + w + sqrt((2c + w)^2 + 4 c w)`; the KL condition asks for this to be below `lambda`.
pub fn calmness_threshold(c_bar: f64, noise_norm: f64) -> f64 {
    let t = 2.0 * c_bar + noise_norm;
    t + (t * t + 4.0 * c_bar * noise_norm).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalmnessEstimate {
    /// Running maxima after each sample; the last entry is the estimate.
    pub c1_running: Vec<f64>,
    pub c2_running: Vec<f64>,
    pub c1_hat: f64,
    pub c2_hat: f64,
    pub note: String,
}

/// `(A*A(U V^T - M)) V` and `(A*A(U V^T - M))^T U`.
pub fn upsilon(op: &SamplingOperator, m: &Matrix, fp: &FactorPair) -> (Matrix, Matrix) {
    let g = op.normal_apply(&(fp.product() - m));
    (&g * &fp.v, g.tr_mul(&fp.u))
}

/// Sampled lower bounds on the calmness moduli of the two maps at `center`:
/// maxima of `||Y_i(P) - Y_i(center)|| / ||P - center||` over uniform points of the ball.
pub fn calmness_estimate(
    op: &SamplingOperator,
    m: &Matrix,
    center: &FactorPair,
    eps_ball: f64,
    samples: usize,
    seed: u64,
) -> Result<CalmnessEstimate> {
    if !(eps_ball > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ball radius {eps_ball} must be > 0"
        )));
    }
    let (y1, y2) = upsilon(op, m, center);
    let (mut c1, mut c2) = (0.0_f64, 0.0_f64);
    let mut c1_running = Vec::with_capacity(samples);
    let mut c2_running = Vec::with_capacity(samples);
    for t in 0..samples {
        let p = ball_point(center, eps_ball, derive_seed(seed, t as u64));
        let dist = p.sub(center).norm();
        if dist > 0.0 {
            let (p1, p2) = upsilon(op, m, &p);
            c1 = c1.max((p1 - &y1).norm() / dist);
            c2 = c2.max((p2 - &y2).norm() / dist);
        }
        c1_running.push(c1);
        c2_running.push(c2);
    }
    Ok(CalmnessEstimate {
        c1_running,
        c2_running,
        c1_hat: c1,
        c2_hat: c2,
        note: "sampled lower bounds on the calmness moduli; a failed threshold is conclusive, a passed one only suggestive".into(),
    })
}

/// Calmness estimate turned into a check of the KL threshold against `lambda`.
pub fn calmness_check(est: &CalmnessEstimate, noise_norm: f64, lambda: f64) -> Check {
    let c_bar = est.c1_hat.max(est.c2_hat);
    Check::new(
        "calmness-threshold",
        calmness_threshold(c_bar, noise_norm),
        lambda,
        0.0,
        Vec::new(),
    )
    .with_value("c1_hat", est.c1_hat)
    .with_value("c2_hat", est.c2_hat)
    .with_note(est.note.clone())
}

// ---------------------------------------------------------------------------
// curvature and equivalence

/// Worst-case curvature comparison over `samples` random rank-`kappa`
/// triples `(X, Y, Z)`. The moduli must be certified for a verdict.
pub fn curvature_audit(
    loss: &LeastSquaresLoss,
    spectrum: &SpectrumEstimate,
    kappa: usize,
    samples: usize,
    seed: u64,
) -> Check {
    let (alpha, beta) = spectrum.hessian_moduli(loss.scale);
    let (n, m) = loss.dims();
    let mut worst = 0.0_f64;
    let low_rank = |rng: &mut ChaCha8Rng| {
        let a = Matrix::from_fn(n, kappa, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = Matrix::from_fn(m, kappa, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = a * b.transpose();
        let norm = x.norm();
        x / norm
    };
    for t in 0..samples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
        let (x, y, z) = (low_rank(&mut rng), low_rank(&mut rng), low_rank(&mut rng));
        let (lhs, _) = curvature_gap(loss, alpha, beta, &x, &y, &z);
        worst = worst.max(lhs);
    }
    let bound = (beta - alpha) / (alpha + beta);
    Check::new(
        "curvature-comparison",
        worst,
        bound,
        1e-12,
        vec![spectrum_premise(spectrum)],
    )
    .with_value("alpha", alpha)
    .with_value("beta", beta)
    .with_value("samples", samples as f64)
}

/// Convex/factored agreement between an APG solution and an AAL solution of
/// the same `lambda`.
pub fn equivalence_audit<L: SmoothLoss>(
    loss: &L,
    lambda: f64,
    r: usize,
    apg: &ApgOutcome,
    aal: &AalOutcome,
    objective_tol: f64,
) -> Result<Vec<Check>> {
    let rank = numerical_rank(&apg.x, DEFAULT_RANK_TOL)?;
    let premises = vec![
        Premise::new(
            "apg-converged",
            apg.stop_reason == StopReason::Converged,
            format!("{:?} after {} iterations", apg.stop_reason, apg.iterations),
        ),
        Premise::new(
            "aal-converged",
            aal.stop_reason == StopReason::Converged,
            format!("{:?} after {} iterations", aal.stop_reason, aal.iterations),
        ),
        Premise::new(
            "apg-rank-at-most-r",
            rank <= r,
            format!("numerical rank {rank}, r = {r}"),
        ),
    ];
    let convex = crate::solvers::convex_objective(loss, lambda, &apg.x)?;
    let phi = loss.value(&aal.fp.product()) + 0.5 * lambda * aal.fp.norm_squared();
    let denom = convex.abs().max(f64::MIN_POSITIVE);

    // factorization of the convex solution with balanced factors of rank r
    let svd = thin_svd(&apg.x)?.truncate(r);
    let mut fu = svd.left;
    let mut fv = svd.right;
    for j in 0..svd.singulars.len() {
        let s = svd.singulars[j].sqrt();
        fu.column_mut(j).scale_mut(s);
        fv.column_mut(j).scale_mut(s);
    }
    let built = FactorPair::new(fu, fv)?;
    let built_phi = loss.value(&built.product()) + 0.5 * lambda * built.norm_squared();

    let nuc = nuclear_norm(&aal.fp.product())?;
    let half = 0.5 * aal.fp.norm_squared();
    Ok(vec![
        Check::new(
            "equivalence.objectives",
            (convex - phi).abs() / denom,
            objective_tol,
            0.0,
            premises.clone(),
        )
        .with_value("convex_objective", convex)
        .with_value("factored_objective", phi)
        .with_value("apg_rank", rank as f64),
        Check::new(
            "equivalence.factorization",
            (built_phi - convex).abs() / denom,
            1e-6,
            0.0,
            premises,
        )
        .with_value("factorization_objective", built_phi),
        Check::new(
            "equivalence.nuclear-bound",
            nuc,
            half,
            1e-10 * half.max(1.0),
            Vec::new(),
        ),
    ])
}
