//! Dense matrix primitives shared by every other module.
//!
//! Matrices are `nalgebra::DMatrix<f64>`, stored column-major. Vectorization
//! (`vec(X)`) therefore stacks columns, which is the order used by the
//! sampling operators and by the text fixtures.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative cutoff used for numerical rank when the caller has no opinion.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

const SVD_MAX_ITERS: usize = 10_000;

/// Thin singular value decomposition `X = left * diag(singulars) * right^T`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub left: Matrix,
    pub singulars: Vector,
    pub right: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.left.clone();
        for (j, s) in self.singulars.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        scaled * self.right.transpose()
    }

    /// Count of singular values above `tol * sigma_1`.
    pub fn rank(&self, tol: f64) -> usize {
        let top = self.singulars.get(0).copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.singulars.iter().filter(|&&s| s > tol * top).count()
    }

    /// Leading `k` triplets.
    pub fn truncate(&self, k: usize) -> Svd {
        let k = k.min(self.singulars.len());
        Svd {
            left: self.left.columns(0, k).into_owned(),
            singulars: self.singulars.rows(0, k).into_owned(),
            right: self.right.columns(0, k).into_owned(),
        }
    }
}

fn svd_parts(x: &Matrix) -> Result<(Matrix, Vector, Matrix)> {
    let (n, m) = x.shape();
    let k = n.min(m);
    let fx = faer::Mat::<f64>::from_fn(n, m, |i, j| x[(i, j)]);
    let svd = fx.thin_svd().map_err(|_| Error::SvdNoConvergence {
        iterations: SVD_MAX_ITERS,
    })?;
    let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
    let u = Matrix::from_fn(n, k, |i, j| fu[(i, j)]);
    let sv = Vector::from_fn(k, |i, _| fs[i]);
    let vt = Matrix::from_fn(k, m, |i, j| fv[(j, i)]);
    Ok((u, sv, vt))
}

fn reconstruction_ok(x: &Matrix, u: &Matrix, sv: &Vector, vt: &Matrix) -> bool {
    let mut us = u.clone();
    for (j, s) in sv.iter().enumerate() {
        us.column_mut(j).scale_mut(*s);
    }
    (us * vt - x).norm() <= 1e-10 * x.norm().max(f64::MIN_POSITIVE)
}

/// Every decomposition is checked against its input before use.
fn raw_svd(x: &Matrix) -> Result<(Matrix, Vector, Matrix)> {
    let (u, sv, vt) = svd_parts(x)?;
    if reconstruction_ok(x, &u, &sv, &vt) {
        return Ok((u, sv, vt));
    }
    Err(Error::SvdNoConvergence {
        iterations: SVD_MAX_ITERS,
    })
}

/// Thin SVD with singular values sorted nonincreasing and a canonical sign:
/// the largest-magnitude entry of every left singular vector is positive.
pub fn thin_svd(x: &Matrix) -> Result<Svd> {
    let (n, m) = x.shape();
    let k = n.min(m);
    if k == 0 {
        return Ok(Svd {
            left: Matrix::zeros(n, 0),
            singulars: Vector::zeros(0),
            right: Matrix::zeros(m, 0),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("thin_svd input"));
    }
    let (u, sv, vt) = raw_svd(x)?;
    let mut order: Vec<usize> = (0..k).collect();
    // stable sort keeps the routine's ordering among ties
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let mut left = Matrix::zeros(n, k);
    let mut right = Matrix::zeros(m, k);
    let mut singulars = Vector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut lcol = u.column(src).into_owned();
        let mut rcol = vt.row(src).transpose();
        let pivot = lcol
            .iter()
            .copied()
            .fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            lcol.neg_mut();
            rcol.neg_mut();
        }
        left.set_column(dst, &lcol);
        right.set_column(dst, &rcol);
        singulars[dst] = sv[src].max(0.0);
    }
    Ok(Svd {
        left,
        singulars,
        right,
    })
}

pub fn singular_values(x: &Matrix) -> Result<Vector> {
    Ok(thin_svd(x)?.singulars)
}

pub fn numerical_rank(x: &Matrix, tol: f64) -> Result<usize> {
    Ok(thin_svd(x)?.rank(tol))
}

/// Extends the orthonormal columns of `basis` to a full orthonormal basis of
/// `R^rows` (two passes of modified Gram-Schmidt against the identity).
pub fn complete_orthonormal(basis: &Matrix) -> Matrix {
    let (rows, k) = basis.shape();
    let mut cols: Vec<Vector> = basis.column_iter().map(|c| c.into_owned()).collect();
    for e in 0..rows {
        if cols.len() == rows {
            break;
        }
        let mut v = Vector::zeros(rows);
        v[e] = 1.0;
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&v);
                v.axpy(-proj, c, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    debug_assert!(cols.len() == rows && k <= rows);
    Matrix::from_columns(&cols)
}

/// Full orthogonal frames `(P, Q)` with `X = P * Diag(sigma) * Q^T`.
pub fn full_svd_frames(x: &Matrix) -> Result<(Matrix, Vector, Matrix)> {
    let svd = thin_svd(x)?;
    Ok((
        complete_orthonormal(&svd.left),
        svd.singulars,
        complete_orthonormal(&svd.right),
    ))
}

#[derive(Clone, Debug)]
pub struct Procrustes {
    pub rotation: Matrix,
    pub distance: f64,
}

/// Orthogonal `R` (reflections allowed) minimizing `||A - B R||_F`.
pub fn procrustes(a: &Matrix, b: &Matrix) -> Result<Procrustes> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "procrustes: A is {:?}, B is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let cross = b.transpose() * a;
    let svd = thin_svd(&cross)?;
    let rotation = &svd.left * svd.right.transpose();
    let distance = (a - b * &rotation).norm();
    Ok(Procrustes { rotation, distance })
}

/// `min_R ||A - B R||_F` over orthogonal `R`.
pub fn orbit_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(procrustes(a, b)?.distance)
}

fn check_split(a: &Matrix, split: usize) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Shape(format!("block projection of {:?}", a.shape())));
    }
    if split > a.nrows() {
        return Err(Error::InvalidArgument(format!(
            "split point {split} outside 0..={}",
            a.nrows()
        )));
    }
    Ok(())
}

/// Keeps the diagonal blocks `A11` (`split x split`) and `A22`.
pub fn p_on(a: &Matrix, split: usize) -> Result<Matrix> {
    check_split(a, split)?;
    Ok(Matrix::from_fn(a.nrows(), a.ncols(), |i, j| {
        if (i < split) == (j < split) {
            a[(i, j)]
        } else {
            0.0
        }
    }))
}

/// Keeps the off-diagonal blocks `A12` and `A21`.
pub fn p_off(a: &Matrix, split: usize) -> Result<Matrix> {
    check_split(a, split)?;
    Ok(Matrix::from_fn(a.nrows(), a.ncols(), |i, j| {
        if (i < split) != (j < split) {
            a[(i, j)]
        } else {
            0.0
        }
    }))
}

/// The factor variable `(U, V)` with `U: n x r`, `V: m x r`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair {
    pub u: Matrix,
    pub v: Matrix,
}

impl FactorPair {
    pub fn new(u: Matrix, v: Matrix) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(Error::Shape(format!(
                "factor column counts differ: {} vs {}",
                u.ncols(),
                v.ncols()
            )));
        }
        Ok(Self { u, v })
    }

    pub fn zeros(n: usize, m: usize, r: usize) -> Self {
        Self {
            u: Matrix::zeros(n, r),
            v: Matrix::zeros(m, r),
        }
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn rows(&self) -> (usize, usize) {
        (self.u.nrows(), self.v.nrows())
    }

    pub fn product(&self) -> Matrix {
        &self.u * self.v.transpose()
    }

    /// `W = (U; V)`.
    pub fn stack(&self) -> Matrix {
        stack_rows(&self.u, &self.v)
    }

    /// `W_hat = (U; -V)`.
    pub fn stack_hat(&self) -> Matrix {
        stack_rows(&self.u, &(-&self.v))
    }

    pub fn from_stacked(w: &Matrix, n: usize) -> Self {
        let m = w.nrows() - n;
        Self {
            u: w.rows(0, n).into_owned(),
            v: w.rows(n, m).into_owned(),
        }
    }

    pub fn dot(&self, other: &FactorPair) -> f64 {
        self.u.dot(&other.u) + self.v.dot(&other.v)
    }

    pub fn norm_squared(&self) -> f64 {
        self.u.norm_squared() + self.v.norm_squared()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn scaled(&self, s: f64) -> FactorPair {
        FactorPair {
            u: &self.u * s,
            v: &self.v * s,
        }
    }

    /// `self + s * other`
    pub fn add_scaled(&self, s: f64, other: &FactorPair) -> FactorPair {
        FactorPair {
            u: &self.u + &other.u * s,
            v: &self.v + &other.v * s,
        }
    }

    pub fn sub(&self, other: &FactorPair) -> FactorPair {
        self.add_scaled(-1.0, other)
    }

    pub fn right_multiply(&self, r: &Matrix) -> FactorPair {
        FactorPair {
            u: &self.u * r,
            v: &self.v * r,
        }
    }

    pub fn to_flat(&self) -> Vector {
        Vector::from_iterator(
            self.u.len() + self.v.len(),
            self.u.iter().chain(self.v.iter()).copied(),
        )
    }

    pub fn from_flat(flat: &Vector, n: usize, m: usize, r: usize) -> FactorPair {
        let (head, tail) = flat.as_slice().split_at(n * r);
        FactorPair {
            u: Matrix::from_column_slice(n, r, head),
            v: Matrix::from_column_slice(m, r, tail),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

pub fn stack_rows(top: &Matrix, bottom: &Matrix) -> Matrix {
    assert_eq!(top.ncols(), bottom.ncols());
    let (n, m, r) = (top.nrows(), bottom.nrows(), top.ncols());
    let mut w = Matrix::zeros(n + m, r);
    w.rows_mut(0, n).copy_from(top);
    w.rows_mut(n, m).copy_from(bottom);
    w
}

/// Deterministic Gaussian start vector for iterative eigen-solvers.
pub(crate) fn seeded_unit_vector(len: usize, seed: u64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vector::from_fn(len, |_, _| StandardNormal.sample(&mut rng));
    let norm = v.norm();
    if norm > 0.0 {
        v /= norm;
    }
    v
}

/// Power iteration for the top eigenvalue of a symmetric PSD map.
/// Stops once `||A v - theta v|| <= tol * theta`.
pub(crate) fn power_iteration(
    len: usize,
    tol: f64,
    seed: u64,
    max_iters: usize,
    apply: impl Fn(&Vector) -> Vector,
) -> f64 {
    if len == 0 {
        return 0.0;
    }
    let mut v = seeded_unit_vector(len, seed);
    let mut theta = 0.0;
    for _ in 0..max_iters {
        let w = apply(&v);
        theta = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let residual = (&w - &v * theta).norm();
        v = w / norm;
        if residual <= tol * theta.abs() {
            break;
        }
    }
    theta.max(0.0)
}

/// Extreme eigenpair of a symmetric linear map, from [`lanczos_smallest`].
#[derive(Clone, Debug)]
pub struct EigenProbe {
    pub value: f64,
    pub vector: Vector,
    /// `||A v - value v||` for the unit vector `v`.
    pub residual: f64,
    pub converged: bool,
    /// Total matrix-vector products spent.
    pub iterations: usize,
}

/// Smallest eigenpair of the symmetric map `apply` on `R^len` by restarted
/// Lanczos with full reorthogonalization. Each cycle builds a Krylov basis of
/// up to `krylov` vectors; breakdown injects a fresh seeded vector so the
/// search is never trapped in an invariant subspace. Converged when the
/// residual is at most `tol * max(|theta_min|, |theta_max|)`.
pub fn lanczos_smallest(
    len: usize,
    apply: impl Fn(&Vector) -> Vector,
    tol: f64,
    seed: u64,
    krylov: usize,
    max_restarts: usize,
) -> EigenProbe {
    assert!(len > 0, "empty operator");
    let k = krylov.clamp(2, len.max(2)).min(len);
    let mut start = seeded_unit_vector(len, seed);
    let mut fresh_stream = 1u64;
    let mut matvecs = 0;
    let mut best: Option<EigenProbe> = None;
    for _ in 0..=max_restarts {
        let mut basis: Vec<Vector> = vec![start.clone()];
        let mut images: Vec<Vector> = Vec::with_capacity(k);
        while images.len() < k {
            let q = basis.last().expect("nonempty basis").clone();
            let aq = apply(&q);
            matvecs += 1;
            images.push(aq.clone());
            if basis.len() == k {
                break;
            }
            let mut w = aq;
            for _ in 0..2 {
                for b in &basis {
                    let proj = b.dot(&w);
                    w.axpy(-proj, b, 1.0);
                }
            }
            let mut norm = w.norm();
            let scale = images.last().map(|v| v.norm()).unwrap_or(1.0).max(1e-300);
            if norm <= 1e-10 * scale {
                // invariant subspace found: continue with an orthogonal fresh direction
                w = seeded_unit_vector(len, seed.wrapping_add(fresh_stream));
                fresh_stream += 1;
                for _ in 0..2 {
                    for b in &basis {
                        let proj = b.dot(&w);
                        w.axpy(-proj, b, 1.0);
                    }
                }
                norm = w.norm();
                if norm <= 1e-10 {
                    break;
                }
            }
            basis.push(w / norm);
        }
        let dim = images.len();
        let q = Matrix::from_columns(&basis[..dim]);
        let aq = Matrix::from_columns(&images);
        let projected = q.tr_mul(&aq);
        let projected = (&projected + projected.transpose()) * 0.5;
        let eig = projected.symmetric_eigen();
        let (mut imin, mut imax) = (0, 0);
        for i in 0..dim {
            if eig.eigenvalues[i] < eig.eigenvalues[imin] {
                imin = i;
            }
            if eig.eigenvalues[i] > eig.eigenvalues[imax] {
                imax = i;
            }
        }
        let theta = eig.eigenvalues[imin];
        let spread = theta.abs().max(eig.eigenvalues[imax].abs());
        let y = eig.eigenvectors.column(imin).into_owned();
        let mut x = &q * &y;
        let xn = x.norm();
        x /= xn;
        let ax = &aq * &y / xn;
        let residual = (&ax - &x * theta).norm();
        let converged = residual <= tol * spread.max(f64::MIN_POSITIVE) || dim == len;
        let candidate = EigenProbe {
            value: theta,
            vector: x.clone(),
            residual,
            converged,
            iterations: matvecs,
        };
        let better = match &best {
            None => true,
            Some(b) => theta < b.value || (converged && !b.converged),
        };
        if better {
            best = Some(candidate);
        }
        if converged {
            break;
        }
        start = x;
    }
    let mut out = best.expect("at least one cycle");
    out.iterations = matvecs;
    out
}

/// Largest eigenvalue of a symmetric map, via [`lanczos_smallest`] on `-A`.
pub fn lanczos_largest(len: usize, apply: impl Fn(&Vector) -> Vector, tol: f64, seed: u64) -> f64 {
    if len == 0 {
        return 0.0;
    }
    -lanczos_smallest(len, |v| -apply(v), tol, seed, 60, 50).value
}

const POWER_SEED: u64 = 0x5eed_1234;

/// Largest singular value via power iteration on `X^T X`.
pub fn spectral_norm(x: &Matrix, tol: f64) -> f64 {
    if x.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let theta = power_iteration(x.ncols(), tol, POWER_SEED, 100_000, |v| x.tr_mul(&(x * v)));
    theta.sqrt()
}

/// Dense symmetric eigenvalues, ascending.
pub fn sym_eigenvalues(a: &Matrix) -> Vector {
    let sym = (a + a.transpose()) * 0.5;
    let mut vals: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    Vector::from_vec(vals)
}

pub fn nuclear_norm(x: &Matrix) -> Result<f64> {
    Ok(singular_values(x)?.sum())
}

/// Rectangular diagonal `rows x cols` matrix with `diag` on its main diagonal.
pub fn rect_diag(rows: usize, cols: usize, diag: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(rows, cols);
    for (i, d) in diag.iter().enumerate().take(rows.min(cols)) {
        out[(i, i)] = *d;
    }
    out
}

/// Text fixture: first line `rows cols`, then one whitespace-separated row per
/// line, every value printed with 17 significant digits.
pub fn write_matrix_text(x: &Matrix) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", x.nrows(), x.ncols());
    for i in 0..x.nrows() {
        let row: Vec<String> = (0..x.ncols()).map(|j| fmt17(x[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

pub fn parse_matrix_text(text: &str) -> Result<Matrix> {
    let mut tokens = text.split_whitespace();
    let mut next_usize = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse(format!("missing {what}")))?
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("{what}: {e}")))
    };
    let rows = next_usize("row count")?;
    let cols = next_usize("column count")?;
    let values: Vec<f64> = tokens
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::Parse(format!("entry {t:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if values.len() != rows * cols {
        return Err(Error::Parse(format!(
            "expected {} entries, found {}",
            rows * cols,
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix fixture"));
    }
    Ok(Matrix::from_row_slice(rows, cols, &values))
}

pub fn save_matrix(path: &Path, x: &Matrix) -> Result<()> {
    std::fs::write(path, write_matrix_text(x)).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_text(&text)
}

/// One value per line, 17 significant digits.
pub fn write_vector_text(v: &Vector) -> String {
    let mut out = String::new();
    for x in v.iter() {
        let _ = writeln!(out, "{}", fmt17(*x));
    }
    out
}

pub fn parse_vector_text(text: &str) -> Result<Vector> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::Parse(format!("entry {t:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    Ok(Vector::from_vec(values))
}

pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}
