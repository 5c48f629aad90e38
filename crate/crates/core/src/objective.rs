//! The loss `f`, the factored objective
//! `Phi(U, V) = f(U V^T) + (lambda/2)(||U||_F^2 + ||V||_F^2)`,
//! its gradient, the `Xi` map and matrix-free Hessian forms.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::{lanczos_smallest, spectral_norm, FactorPair, Matrix, Vector};
use crate::sampling::{RecoveryInstance, SamplingOperator};

/// A twice differentiable loss on `R^{n x m}`. Only least squares ships; the
/// trait is the hook for other losses.
pub trait SmoothLoss: Send + Sync {
    fn dims(&self) -> (usize, usize);
    fn value(&self, x: &Matrix) -> f64;
    fn gradient(&self, x: &Matrix) -> Matrix;
    /// `grad^2 f(X)[H]`, the Hessian applied to a direction.
    fn hessian_apply(&self, x: &Matrix, h: &Matrix) -> Matrix;

    fn value_and_gradient(&self, x: &Matrix) -> (f64, Matrix) {
        (self.value(x), self.gradient(x))
    }

    fn hessian_quadform(&self, x: &Matrix, h: &Matrix) -> f64 {
        h.dot(&self.hessian_apply(x, h))
    }

    /// Upper bound on `||grad^2 f||` as an operator on `R^{n x m}`.
    fn curvature_bound(&self) -> f64;

    /// Normalizer for stopping residuals; `grad_scale * (1 + ||y||)` for least squares.
    fn residual_normalizer(&self) -> f64;
}

/// `f(X) = scale * ||A(X) - y||^2`, scale taken from the operator.
#[derive(Clone, Debug)]
pub struct LeastSquaresLoss {
    pub operator: Arc<SamplingOperator>,
    pub y: Vector,
    pub scale: f64,
}

impl LeastSquaresLoss {
    pub fn new(operator: Arc<SamplingOperator>, y: Vector) -> Result<Self> {
        if y.len() != operator.measurements() {
            return Err(Error::Shape(format!(
                "observation length {} vs {} measurements",
                y.len(),
                operator.measurements()
            )));
        }
        let scale = operator.loss_scale();
        Ok(Self { operator, y, scale })
    }

    pub fn from_instance(inst: &RecoveryInstance) -> Self {
        Self {
            operator: inst.operator.clone(),
            y: inst.y.clone(),
            scale: inst.operator.loss_scale(),
        }
    }

    /// `f(X) = (1/2) ||X - M||_F^2`.
    pub fn full_observation(m: &Matrix) -> Self {
        let (n, cols) = m.shape();
        Self {
            operator: Arc::new(SamplingOperator::full(n, cols)),
            y: Vector::from_column_slice(m.as_slice()),
            scale: 0.5,
        }
    }

    pub fn grad_scale(&self) -> f64 {
        2.0 * self.scale
    }

    fn residual(&self, x: &Matrix) -> Vector {
        self.operator.apply(x) - &self.y
    }
}

impl SmoothLoss for LeastSquaresLoss {
    fn dims(&self) -> (usize, usize) {
        self.operator.dims()
    }

    fn value(&self, x: &Matrix) -> f64 {
        self.scale * self.residual(x).norm_squared()
    }

    fn gradient(&self, x: &Matrix) -> Matrix {
        self.operator.adjoint(&self.residual(x)) * self.grad_scale()
    }

    fn value_and_gradient(&self, x: &Matrix) -> (f64, Matrix) {
        let res = self.residual(x);
        (
            self.scale * res.norm_squared(),
            self.operator.adjoint(&res) * self.grad_scale(),
        )
    }

    fn hessian_apply(&self, _x: &Matrix, h: &Matrix) -> Matrix {
        self.operator.normal_apply(h) * self.grad_scale()
    }

    /// `2 * scale * ||A(H)||^2`, the same at every base point.
    fn hessian_quadform(&self, _x: &Matrix, h: &Matrix) -> f64 {
        self.grad_scale() * self.operator.apply(h).norm_squared()
    }

    fn curvature_bound(&self) -> f64 {
        self.grad_scale() * self.operator.op_norm_sq()
    }

    fn residual_normalizer(&self) -> f64 {
        self.grad_scale() * (1.0 + self.y.norm())
    }
}

/// Smallest eigenpair of the Hessian of `Phi` at a point.
#[derive(Clone, Debug)]
pub struct HessianProbe {
    pub value: f64,
    pub direction: FactorPair,
    pub converged: bool,
    pub iterations: usize,
    /// `-1e-6 * (lambda + ||grad f(X)||)`.
    pub psd_threshold: f64,
}

impl HessianProbe {
    pub fn is_psd(&self) -> bool {
        self.value >= self.psd_threshold
    }
}

/// Largest problem size (`(n + m) r`) for which [`RegularizedObjective::dense_hessian`] assembles.
pub const DENSE_HESSIAN_LIMIT: usize = 400;

#[derive(Clone, Debug)]
pub struct RegularizedObjective<L: SmoothLoss = LeastSquaresLoss> {
    pub loss: L,
    pub lambda: f64,
    pub r: usize,
}

impl RegularizedObjective<LeastSquaresLoss> {
    pub fn from_instance(inst: &RecoveryInstance, lambda: f64, r: usize) -> Result<Self> {
        Self::new(LeastSquaresLoss::from_instance(inst), lambda, r)
    }
}

impl<L: SmoothLoss> RegularizedObjective<L> {
    pub fn new(loss: L, lambda: f64, r: usize) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be > 0, got {lambda}"
            )));
        }
        if r == 0 {
            return Err(Error::InvalidArgument("rank r must be >= 1".into()));
        }
        Ok(Self { loss, lambda, r })
    }

    fn check(&self, fp: &FactorPair) {
        let (n, m) = self.loss.dims();
        assert_eq!(fp.rows(), (n, m), "factor row counts");
    }

    pub fn value(&self, fp: &FactorPair) -> f64 {
        self.check(fp);
        self.loss.value(&fp.product()) + 0.5 * self.lambda * fp.norm_squared()
    }

    /// `(grad f(X) V + lambda U ; grad f(X)^T U + lambda V)` with `X = U V^T`.
    pub fn gradient(&self, fp: &FactorPair) -> FactorPair {
        self.check(fp);
        let g = self.loss.gradient(&fp.product());
        self.gradient_from(fp, &g)
    }

    pub(crate) fn gradient_from(&self, fp: &FactorPair, g: &Matrix) -> FactorPair {
        FactorPair {
            u: g * &fp.v + &fp.u * self.lambda,
            v: g.tr_mul(&fp.u) + &fp.v * self.lambda,
        }
    }

    pub fn value_and_gradient(&self, fp: &FactorPair) -> (f64, FactorPair) {
        self.check(fp);
        let (fv, g) = self.loss.value_and_gradient(&fp.product());
        (
            fv + 0.5 * self.lambda * fp.norm_squared(),
            self.gradient_from(fp, &g),
        )
    }

    /// `||grad Phi||_F`.
    pub fn gradient_norm(&self, fp: &FactorPair) -> f64 {
        self.gradient(fp).norm()
    }

    /// Quadratic form of the Hessian:
    /// `grad^2 f(X)(S, S) + 2 <grad f(X), D_U D_V^T> + lambda ||D||^2`,
    /// `S = U D_V^T + D_U V^T`.
    pub fn hess_quadform(&self, fp: &FactorPair, d: &FactorPair) -> f64 {
        self.check(fp);
        let x = fp.product();
        let g = self.loss.gradient(&x);
        let s = &fp.u * d.v.transpose() + &d.u * fp.v.transpose();
        self.loss.hessian_quadform(&x, &s)
            + 2.0 * g.dot(&(&d.u * d.v.transpose()))
            + self.lambda * d.norm_squared()
    }

    /// Hessian applied to a direction.
    pub fn hess_apply(&self, fp: &FactorPair, d: &FactorPair) -> FactorPair {
        let x = fp.product();
        let g = self.loss.gradient(&x);
        self.hess_apply_with(fp, &x, &g, d)
    }

    fn hess_apply_with(
        &self,
        fp: &FactorPair,
        x: &Matrix,
        g: &Matrix,
        d: &FactorPair,
    ) -> FactorPair {
        let s = &fp.u * d.v.transpose() + &d.u * fp.v.transpose();
        let hs = self.loss.hessian_apply(x, &s);
        FactorPair {
            u: &hs * &fp.v + g * &d.v + &d.u * self.lambda,
            v: hs.tr_mul(&fp.u) + g.tr_mul(&d.u) + &d.v * self.lambda,
        }
    }

    /// `[[lambda I, grad f(X)], [grad f(X)^T, lambda I]]`.
    pub fn xi_matrix(&self, x: &Matrix) -> Matrix {
        xi_from_gradient(&self.loss.gradient(x), self.lambda)
    }

    /// Spectral norm of `Xi(X)`: its eigenvalues are `lambda +- sigma_i(grad f)`
    /// (and `lambda`), so the norm is `lambda + ||grad f(X)||`.
    pub fn xi_norm(&self, x: &Matrix) -> f64 {
        self.lambda + spectral_norm(&self.loss.gradient(x), 1e-12)
    }

    /// Smallest Hessian eigenvalue by restarted Lanczos on [`Self::hess_apply`].
    pub fn min_eig_hessian(&self, fp: &FactorPair, tol: f64) -> HessianProbe {
        self.check(fp);
        let (n, m) = self.loss.dims();
        let r = fp.rank();
        let x = fp.product();
        let g = self.loss.gradient(&x);
        let dim = (n + m) * r;
        let probe = lanczos_smallest(
            dim,
            |v| {
                let d = FactorPair::from_flat(v, n, m, r);
                self.hess_apply_with(fp, &x, &g, &d).to_flat()
            },
            tol,
            0x4e55,
            120,
            200,
        );
        HessianProbe {
            value: probe.value,
            direction: FactorPair::from_flat(&probe.vector, n, m, r),
            converged: probe.converged,
            iterations: probe.iterations,
            psd_threshold: -1e-6 * (self.lambda + spectral_norm(&g, 1e-10)),
        }
    }

    /// `Phi(point) - Phi(center)` expanded around `center` so that no O(1)
    /// terms cancel. Exact for quadratic losses such as least squares:
    /// with `E = point - center` and `D = X - X_c`,
    /// `<grad Phi(center), E> + <grad f(X_c), E_U E_V^T> + (1/2) grad^2 f(D, D) + (lambda/2)||E||^2`.
    pub fn gap_from(&self, center: &FactorPair, point: &FactorPair) -> f64 {
        self.check(center);
        self.check(point);
        let xc = center.product();
        let g = self.loss.gradient(&xc);
        let e = point.sub(center);
        let d = &center.u * e.v.transpose() + &e.u * center.v.transpose() + &e.u * e.v.transpose();
        self.gradient_from(center, &g).dot(&e)
            + g.dot(&(&e.u * e.v.transpose()))
            + 0.5 * self.loss.hessian_quadform(&xc, &d)
            + 0.5 * self.lambda * e.norm_squared()
    }

    /// `grad Phi(point)` expanded around `center`; exact for quadratic losses
    /// and free of cancellation when `point` is close to a critical `center`.
    pub fn gradient_near(&self, center: &FactorPair, point: &FactorPair) -> FactorPair {
        self.check(center);
        self.check(point);
        let xc = center.product();
        let g = self.loss.gradient(&xc);
        let base = self.gradient_from(center, &g);
        let e = point.sub(center);
        let d = &center.u * e.v.transpose() + &e.u * center.v.transpose() + &e.u * e.v.transpose();
        let hd = self.loss.hessian_apply(&xc, &d);
        FactorPair {
            u: base.u + &g * &e.v + &hd * &point.v + &e.u * self.lambda,
            v: base.v + g.tr_mul(&e.u) + hd.tr_mul(&point.u) + &e.v * self.lambda,
        }
    }

    /// Dense Hessian in the [`FactorPair::to_flat`] coordinates. Test oracle
    /// only: refuses more than [`DENSE_HESSIAN_LIMIT`] variables.
    pub fn dense_hessian(&self, fp: &FactorPair) -> Result<Matrix> {
        let (n, m) = self.loss.dims();
        let r = fp.rank();
        let dim = (n + m) * r;
        if dim > DENSE_HESSIAN_LIMIT {
            return Err(Error::InvalidArgument(format!(
                "dense Hessian of {dim} variables exceeds {DENSE_HESSIAN_LIMIT}"
            )));
        }
        let x = fp.product();
        let g = self.loss.gradient(&x);
        let mut h = Matrix::zeros(dim, dim);
        for j in 0..dim {
            let mut e = Vector::zeros(dim);
            e[j] = 1.0;
            let col = self.hess_apply_with(fp, &x, &g, &FactorPair::from_flat(&e, n, m, r));
            h.set_column(j, &col.to_flat());
        }
        Ok((&h + h.transpose()) * 0.5)
    }
}

/// Curvature comparison for the loss at `x` along `(y, z)`:
/// returns `(|2/(alpha+beta) grad^2 f(x)(y, z) - <y, z>|, (beta-alpha)/(alpha+beta) ||y|| ||z||)`
/// with `alpha`, `beta` the Hessian moduli. The first should not exceed the
/// second when `y`, `z` and `x` are within the restricted rank.
pub fn curvature_gap<L: SmoothLoss>(
    loss: &L,
    alpha: f64,
    beta: f64,
    x: &Matrix,
    y: &Matrix,
    z: &Matrix,
) -> (f64, f64) {
    let form = y.dot(&loss.hessian_apply(x, z));
    let lhs = (2.0 / (alpha + beta) * form - y.dot(z)).abs();
    let rhs = (beta - alpha) / (alpha + beta) * y.norm() * z.norm();
    (lhs, rhs)
}

pub fn xi_from_gradient(g: &Matrix, lambda: f64) -> Matrix {
    let (n, m) = g.shape();
    let mut xi = Matrix::identity(n + m, n + m) * lambda;
    xi.view_mut((0, n), (n, m)).copy_from(g);
    xi.view_mut((n, 0), (m, n)).copy_from(&g.transpose());
    xi
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameDirection {
    /// `(U, V) -> (P^T U, Q^T V)`
    ToDiagonal,
    /// `(U, V) -> (P U, Q V)`
    FromDiagonal,
}

fn check_orthogonal(p: &Matrix, what: &str) -> Result<()> {
    if !p.is_square() {
        return Err(Error::Shape(format!("{what} is not square")));
    }
    let k = p.nrows();
    let defect = (p.tr_mul(p) - Matrix::identity(k, k)).norm();
    if defect > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "{what} is not orthogonal (||P^T P - I|| = {defect:e})"
        )));
    }
    Ok(())
}

/// Change of frame between `Phi` for `M = P Sigma Q^T` and the diagonal
/// objective for `Sigma`; objective values are preserved.
pub fn rotate_frame(
    fp: &FactorPair,
    p: &Matrix,
    q: &Matrix,
    direction: FrameDirection,
) -> Result<FactorPair> {
    check_orthogonal(p, "P")?;
    check_orthogonal(q, "Q")?;
    if p.nrows() != fp.u.nrows() || q.nrows() != fp.v.nrows() {
        return Err(Error::Shape("frame sizes do not match the factors".into()));
    }
    Ok(match direction {
        FrameDirection::ToDiagonal => FactorPair {
            u: p.tr_mul(&fp.u),
            v: q.tr_mul(&fp.v),
        },
        FrameDirection::FromDiagonal => FactorPair {
            u: p * &fp.u,
            v: q * &fp.v,
        },
    })
}

/// Full observation of a rectangular diagonal `Sigma`:
/// `(1/2)||U V^T - Sigma||_F^2 + (lambda/2)(||U||^2 + ||V||^2)`.
#[derive(Clone, Debug)]
pub struct DiagonalObjective {
    pub n: usize,
    pub m: usize,
    /// Diagonal of `Sigma`, nonincreasing, length `min(n, m)`.
    pub sigma: Vec<f64>,
    pub lambda: f64,
    pub r: usize,
}

/// Relative tolerance for calling two diagonal values equal.
pub const DISTINCT_TOL: f64 = 1e-9;

impl DiagonalObjective {
    pub fn new(n: usize, m: usize, sigma: Vec<f64>, lambda: f64, r: usize) -> Result<Self> {
        if sigma.len() != n.min(m) {
            return Err(Error::Shape(format!(
                "diagonal has {} entries, expected {}",
                sigma.len(),
                n.min(m)
            )));
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) || sigma.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "diagonal must be nonnegative and nonincreasing".into(),
            ));
        }
        if r == 0 || r > sigma.len() {
            return Err(Error::InvalidArgument(format!("rank {r} out of range")));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be > 0, got {lambda}"
            )));
        }
        Ok(Self {
            n,
            m,
            sigma,
            lambda,
            r,
        })
    }

    pub fn sigma_matrix(&self) -> Matrix {
        crate::matrix::rect_diag(self.n, self.m, &self.sigma)
    }

    /// `sigma_i` with 1-based index; zero past the diagonal.
    pub fn sigma_at(&self, i: usize) -> f64 {
        if i == 0 {
            return f64::INFINITY;
        }
        self.sigma.get(i - 1).copied().unwrap_or(0.0)
    }

    /// Distinct values `s_1 > ... > s_s` among the leading `r` entries.
    pub fn distinct_top(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        let scale = self
            .sigma
            .first()
            .copied()
            .unwrap_or(0.0)
            .max(f64::MIN_POSITIVE);
        for &s in &self.sigma[..self.r] {
            match out.last() {
                Some(&last) if (last - s).abs() <= DISTINCT_TOL * scale => {}
                _ => out.push(s),
            }
        }
        out
    }

    pub fn objective(&self) -> RegularizedObjective<LeastSquaresLoss> {
        RegularizedObjective {
            loss: LeastSquaresLoss::full_observation(&self.sigma_matrix()),
            lambda: self.lambda,
            r: self.r,
        }
    }
}
