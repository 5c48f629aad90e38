//! Observation operators `A: R^{n x m} -> R^p`, noisy instances
//! `y = A(M*) + omega`, and restricted-spectrum estimates.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::matrix::{
    lanczos_largest, load_matrix, numerical_rank, parse_vector_text, save_matrix, spectral_norm,
    write_vector_text, Matrix, Vector,
};

/// Default cap on stored Gaussian measurement entries (`p * n * m`).
pub const DEFAULT_MAX_ENTRIES: usize = 64 * 1024 * 1024;

/// Linear observation map with its adjoint. Immutable once built.
#[derive(Clone, Debug)]
pub enum SamplingOperator {
    /// `A(X) = vec(X)`.
    Full { n: usize, m: usize },
    /// Row `i` of `sensing` is `vec(A_i)`; entries i.i.d. `N(0, 1/p)`.
    Gaussian {
        n: usize,
        m: usize,
        sensing: Matrix,
        /// Filled on first use by [`SamplingOperator::op_norm_sq`].
        op_norm_sq: OnceLock<f64>,
    },
    /// `A(X) = vec(H o X)` for a positive weight matrix `H`.
    Weighted { weights: Matrix },
    /// Observes the listed column-major positions.
    Mask {
        n: usize,
        m: usize,
        observed: Vec<usize>,
    },
}

fn vec_of(x: &Matrix) -> Vector {
    Vector::from_column_slice(x.as_slice())
}

/// Four-way unrolled dot product; lets the compiler vectorize without
/// reassociation flags.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = a.as_chunks::<4>();
    let (cb, rb) = b.as_chunks::<4>();
    for (x, y) in ca.iter().zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl SamplingOperator {
    pub fn full(n: usize, m: usize) -> Self {
        SamplingOperator::Full { n, m }
    }

    /// `p` i.i.d. `N(0, 1/p)` measurement matrices. Refuses storage above
    /// `max_entries` doubles.
    pub fn gaussian(n: usize, m: usize, p: usize, seed: u64, max_entries: usize) -> Result<Self> {
        if p == 0 || n == 0 || m == 0 {
            return Err(Error::InvalidArgument(
                "gaussian sensing needs n, m, p >= 1".into(),
            ));
        }
        let requested = p.saturating_mul(n).saturating_mul(m);
        if requested > max_entries {
            return Err(Error::MemoryCap {
                requested,
                cap: max_entries,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = (1.0 / p as f64).sqrt();
        let values: Vec<f64> = (0..requested)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect();
        let sensing = Matrix::from_row_slice(p, n * m, &values);
        Ok(Self::from_sensing(n, m, sensing))
    }

    /// Wraps an explicit `p x nm` sensing matrix.
    pub fn from_sensing(n: usize, m: usize, sensing: Matrix) -> Self {
        assert_eq!(sensing.ncols(), n * m, "sensing width must be n*m");
        SamplingOperator::Gaussian {
            n,
            m,
            sensing,
            op_norm_sq: OnceLock::new(),
        }
    }

    pub fn weighted(weights: Matrix) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weights must be positive and finite, found {w}"
            )));
        }
        Ok(SamplingOperator::Weighted { weights })
    }

    /// Bernoulli(`prob`) mask, drawn in column-major order.
    pub fn mask(n: usize, m: usize, prob: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::InvalidArgument(format!("mask probability {prob}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let observed = (0..n * m).filter(|_| rng.random::<f64>() < prob).collect();
        Ok(SamplingOperator::Mask { n, m, observed })
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            SamplingOperator::Full { n, m }
            | SamplingOperator::Gaussian { n, m, .. }
            | SamplingOperator::Mask { n, m, .. } => (*n, *m),
            SamplingOperator::Weighted { weights } => weights.shape(),
        }
    }

    pub fn measurements(&self) -> usize {
        match self {
            SamplingOperator::Full { n, m } => n * m,
            SamplingOperator::Gaussian { sensing, .. } => sensing.nrows(),
            SamplingOperator::Weighted { weights } => weights.len(),
            SamplingOperator::Mask { observed, .. } => observed.len(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SamplingOperator::Full { .. } => "full-observation",
            SamplingOperator::Gaussian { .. } => "gaussian-sensing",
            SamplingOperator::Weighted { .. } => "weighted",
            SamplingOperator::Mask { .. } => "mask",
        }
    }

    /// The `c` in `f(X) = c ||A(X) - y||^2`: `1/(2p)` for Gaussian sensing,
    /// `1/2` otherwise.
    pub fn loss_scale(&self) -> f64 {
        match self {
            SamplingOperator::Gaussian { sensing, .. } => 0.5 / sensing.nrows() as f64,
            _ => 0.5,
        }
    }

    pub fn apply(&self, x: &Matrix) -> Vector {
        assert_eq!(x.shape(), self.dims(), "operator input shape");
        match self {
            SamplingOperator::Full { .. } => vec_of(x),
            SamplingOperator::Gaussian { sensing, .. } => sensing * vec_of(x),
            SamplingOperator::Weighted { weights } => vec_of(&weights.component_mul(x)),
            SamplingOperator::Mask { observed, .. } => {
                let flat = x.as_slice();
                Vector::from_iterator(observed.len(), observed.iter().map(|&i| flat[i]))
            }
        }
    }

    pub fn adjoint(&self, v: &Vector) -> Matrix {
        assert_eq!(v.len(), self.measurements(), "adjoint input length");
        let (n, m) = self.dims();
        match self {
            SamplingOperator::Full { .. } => Matrix::from_column_slice(n, m, v.as_slice()),
            SamplingOperator::Gaussian { sensing, .. } => {
                // columns are contiguous, so A^T v is one dot product per column
                let p = sensing.nrows();
                let v = v.as_slice();
                let cols = sensing.as_slice().chunks_exact(p).map(|col| dot(col, v));
                Matrix::from_iterator(n, m, cols)
            }
            SamplingOperator::Weighted { weights } => {
                Matrix::from_column_slice(n, m, v.as_slice()).component_mul(weights)
            }
            SamplingOperator::Mask { observed, .. } => {
                let mut out = Matrix::zeros(n, m);
                let flat = out.as_mut_slice();
                for (k, &i) in observed.iter().enumerate() {
                    flat[i] = v[k];
                }
                out
            }
        }
    }

    /// `A*A(X)` without the intermediate vector where possible.
    pub fn normal_apply(&self, x: &Matrix) -> Matrix {
        match self {
            SamplingOperator::Full { .. } => x.clone(),
            SamplingOperator::Weighted { weights } => {
                weights.component_mul(weights).component_mul(x)
            }
            _ => self.adjoint(&self.apply(x)),
        }
    }

    /// `||A||_op^2` (largest eigenvalue of `A*A`).
    pub fn op_norm_sq(&self) -> f64 {
        match self {
            SamplingOperator::Full { .. } => 1.0,
            SamplingOperator::Gaussian {
                sensing,
                op_norm_sq,
                ..
            } => *op_norm_sq.get_or_init(|| {
                // eigenvalue error is ~ residual^2, so 1e-7 residual is ample
                if sensing.nrows() <= sensing.ncols() {
                    lanczos_largest(sensing.nrows(), |v| sensing * sensing.tr_mul(v), 1e-7, 7)
                } else {
                    lanczos_largest(sensing.ncols(), |v| sensing.tr_mul(&(sensing * v)), 1e-7, 7)
                }
            }),
            SamplingOperator::Weighted { weights } => weights.iter().fold(0.0, |a, w| a.max(w * w)),
            SamplingOperator::Mask { observed, .. } => {
                if observed.is_empty() {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Restricted extremes of `||A(X)||^2 / ||X||_F^2` when known in closed form.
    pub fn exact_spectrum(&self) -> Option<(f64, f64)> {
        match self {
            SamplingOperator::Full { .. } => Some((1.0, 1.0)),
            SamplingOperator::Weighted { weights } => {
                let lo = weights.iter().fold(f64::INFINITY, |a, w| a.min(w * w));
                let hi = weights.iter().fold(0.0_f64, |a, w| a.max(w * w));
                Some((lo, hi))
            }
            _ => None,
        }
    }
}

/// How the noise vector is drawn. `xi ~ N(0, I_p)` in every case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "calibration", rename_all = "kebab-case")]
pub enum NoiseSpec {
    None,
    /// `omega = sigma * xi`.
    Absolute {
        sigma: f64,
    },
    /// `omega = ratio * ||A(M*)|| / ||xi|| * xi`, so `||omega|| = ratio * ||A(M*)||`.
    Relative {
        ratio: f64,
    },
    /// `omega = ratio * ||M*||_2 / ||xi|| * xi` with the spectral norm of `M*`.
    RelativeSpectral {
        ratio: f64,
    },
}

impl NoiseSpec {
    fn validate(&self) -> Result<()> {
        let value = match self {
            NoiseSpec::None => 0.0,
            NoiseSpec::Absolute { sigma } => *sigma,
            NoiseSpec::Relative { ratio } | NoiseSpec::RelativeSpectral { ratio } => *ratio,
        };
        if value >= 0.0 && value.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("noise level {value}")))
        }
    }
}

/// Recipe for building an operator inside [`generate_instance`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OperatorSpec {
    FullObservation,
    GaussianSensing {
        p: usize,
        #[serde(default = "default_max_entries")]
        max_entries: usize,
    },
    /// Weights drawn uniformly from `[low, high]`.
    Weighted {
        low: f64,
        high: f64,
    },
    Mask {
        probability: f64,
    },
}

fn default_max_entries() -> usize {
    DEFAULT_MAX_ENTRIES
}

impl OperatorSpec {
    pub fn gaussian(p: usize) -> Self {
        OperatorSpec::GaussianSensing {
            p,
            max_entries: DEFAULT_MAX_ENTRIES,
        }
    }

    pub fn build(&self, n: usize, m: usize, seed: u64) -> Result<SamplingOperator> {
        match self {
            OperatorSpec::FullObservation => Ok(SamplingOperator::full(n, m)),
            OperatorSpec::GaussianSensing { p, max_entries } => {
                SamplingOperator::gaussian(n, m, *p, seed, *max_entries)
            }
            OperatorSpec::Weighted { low, high } => {
                if !(*low > 0.0 && low <= high) {
                    return Err(Error::InvalidArgument(format!(
                        "weight range [{low}, {high}]"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = Matrix::from_fn(n, m, |_, _| rng.random_range(*low..=*high));
                SamplingOperator::weighted(w)
            }
            OperatorSpec::Mask { probability } => SamplingOperator::mask(n, m, *probability, seed),
        }
    }
}

/// `y = A(M*) + omega` together with everything needed to rebuild it.
#[derive(Clone, Debug)]
pub struct RecoveryInstance {
    pub m_star: Matrix,
    pub operator: Arc<SamplingOperator>,
    pub omega: Vector,
    pub y: Vector,
    pub r_star: usize,
    pub seed: u64,
    pub noise: NoiseSpec,
}

// sub-seed streams
const STREAM_FACTORS: u64 = 1;
const STREAM_OPERATOR: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let values: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::from_row_slice(rows, cols, &values)
}

/// Draws `omega` for the given truth and operator.
pub fn draw_noise(
    operator: &SamplingOperator,
    m_star: &Matrix,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Vector> {
    noise.validate()?;
    let p = operator.measurements();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = Vector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(&mut rng)));
    let xi_norm = xi.norm();
    let sigma = match noise {
        NoiseSpec::None => return Ok(Vector::zeros(p)),
        NoiseSpec::Absolute { sigma } => *sigma,
        NoiseSpec::Relative { ratio } => ratio * operator.apply(m_star).norm() / xi_norm,
        NoiseSpec::RelativeSpectral { ratio } => ratio * spectral_norm(m_star, 1e-12) / xi_norm,
    };
    Ok(xi * sigma)
}

impl RecoveryInstance {
    /// Instance around a caller-supplied truth. No rank check beyond `4 r* <= min(n, m)`.
    pub fn from_truth(
        m_star: Matrix,
        operator: Arc<SamplingOperator>,
        noise: NoiseSpec,
        r_star: usize,
        seed: u64,
    ) -> Result<Self> {
        if m_star.shape() != operator.dims() {
            return Err(Error::Shape(format!(
                "truth {:?} vs operator {:?}",
                m_star.shape(),
                operator.dims()
            )));
        }
        let omega = draw_noise(&operator, &m_star, &noise, derive_seed(seed, STREAM_NOISE))?;
        Self::from_parts(m_star, operator, omega, r_star, seed, noise)
    }

    pub fn from_parts(
        m_star: Matrix,
        operator: Arc<SamplingOperator>,
        omega: Vector,
        r_star: usize,
        seed: u64,
        noise: NoiseSpec,
    ) -> Result<Self> {
        if omega.len() != operator.measurements() {
            return Err(Error::Shape(format!(
                "noise length {} vs {} measurements",
                omega.len(),
                operator.measurements()
            )));
        }
        let y = operator.apply(&m_star) + &omega;
        Ok(Self {
            m_star,
            operator,
            omega,
            y,
            r_star,
            seed,
            noise,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.m_star.shape()
    }

    /// `||A*(omega)||` times `2 * loss_scale`, which is `||grad f(M*)||`.
    pub fn noise_adjoint_norm(&self) -> f64 {
        2.0 * self.operator.loss_scale() * self.raw_noise_adjoint_norm()
    }

    /// `||A*(omega)||` without the loss scale.
    pub fn raw_noise_adjoint_norm(&self) -> f64 {
        if self.omega.iter().all(|w| *w == 0.0) {
            return 0.0;
        }
        spectral_norm(&self.operator.adjoint(&self.omega), 1e-12)
    }

    /// Writes `metadata.json`, `m_star.txt`, `y.txt`, `omega.txt` and the
    /// operator's data (`sensing.txt`, `weights.txt` or `mask.txt`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (n, m) = self.dims();
        let meta = InstanceMetadata {
            n,
            m,
            r_star: self.r_star,
            p: self.operator.measurements(),
            seed: self.seed,
            noise: self.noise.clone(),
            operator: self.operator.kind().to_string(),
        };
        let meta_path = dir.join("metadata.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
        save_matrix(&dir.join("m_star.txt"), &self.m_star)?;
        write_text(&dir.join("y.txt"), &write_vector_text(&self.y))?;
        write_text(&dir.join("omega.txt"), &write_vector_text(&self.omega))?;
        match self.operator.as_ref() {
            SamplingOperator::Gaussian { sensing, .. } => {
                save_matrix(&dir.join("sensing.txt"), sensing)?
            }
            SamplingOperator::Weighted { weights } => {
                save_matrix(&dir.join("weights.txt"), weights)?
            }
            SamplingOperator::Mask { observed, .. } => {
                let idx = Vector::from_iterator(observed.len(), observed.iter().map(|&i| i as f64));
                write_text(&dir.join("mask.txt"), &write_vector_text(&idx))?
            }
            SamplingOperator::Full { .. } => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("metadata.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: InstanceMetadata = serde_json::from_str(&text)?;
        let m_star = load_matrix(&dir.join("m_star.txt"))?;
        let omega = parse_vector_text(&read_text(&dir.join("omega.txt"))?)?;
        let (n, m) = (meta.n, meta.m);
        let operator = match meta.operator.as_str() {
            "full-observation" => SamplingOperator::full(n, m),
            "gaussian-sensing" => {
                SamplingOperator::from_sensing(n, m, load_matrix(&dir.join("sensing.txt"))?)
            }
            "weighted" => SamplingOperator::weighted(load_matrix(&dir.join("weights.txt"))?)?,
            "mask" => {
                let idx = parse_vector_text(&read_text(&dir.join("mask.txt"))?)?;
                SamplingOperator::Mask {
                    n,
                    m,
                    observed: idx.iter().map(|v| *v as usize).collect(),
                }
            }
            other => return Err(Error::Parse(format!("unknown operator kind {other:?}"))),
        };
        Self::from_parts(
            m_star,
            Arc::new(operator),
            omega,
            meta.r_star,
            meta.seed,
            meta.noise,
        )
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceMetadata {
    pub n: usize,
    pub m: usize,
    pub r_star: usize,
    pub p: usize,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub operator: String,
}

/// `M* = U* V*^T` with standard normal factors, observed through the operator
/// built from `spec`, plus noise. Requires `4 r* <= min(n, m)`.
pub fn generate_instance(
    n: usize,
    m: usize,
    r_star: usize,
    spec: &OperatorSpec,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<RecoveryInstance> {
    if r_star == 0 || 4 * r_star > n.min(m) {
        return Err(Error::RankConstraint(format!(
            "need 1 <= r* and 4 r* <= min(n, m); got r* = {r_star}, n = {n}, m = {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_FACTORS));
    let u = gaussian_matrix(n, r_star, &mut rng);
    let v = gaussian_matrix(m, r_star, &mut rng);
    let m_star = &u * v.transpose();
    let rank = numerical_rank(&m_star, 1e-10)?;
    if rank != r_star {
        return Err(Error::RankConstraint(format!(
            "generated truth has numerical rank {rank}, expected {r_star}"
        )));
    }
    let operator = Arc::new(spec.build(n, m, derive_seed(seed, STREAM_OPERATOR))?);
    RecoveryInstance::from_truth(m_star, operator, noise.clone(), r_star, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumMethod {
    ExactFullObservation,
    ExactWeighted,
    MonteCarlo,
    Supplied,
}

/// Restricted extremes of `||A(X)||^2` over unit rank-`kappa` `X`. The loss
/// Hessian moduli are these times `2 * loss_scale`; see [`Self::hessian_moduli`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub alpha: f64,
    pub beta: f64,
    pub rank_used: usize,
    pub trials: usize,
    pub method: SpectrumMethod,
}

impl SpectrumEstimate {
    /// Caller-asserted moduli, e.g. to exercise inadmissible configurations.
    pub fn supplied(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            rank_used: 0,
            trials: 0,
            method: SpectrumMethod::Supplied,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(
            self.method,
            SpectrumMethod::ExactFullObservation | SpectrumMethod::ExactWeighted
        )
    }

    pub fn hessian_moduli(&self, loss_scale: f64) -> (f64, f64) {
        (2.0 * loss_scale * self.alpha, 2.0 * loss_scale * self.beta)
    }
}

/// Value of `||A(X)||^2` at the `trial`-th random unit rank-`kappa` matrix.
fn spectrum_trial(op: &SamplingOperator, kappa: usize, seed: u64, trial: usize) -> f64 {
    let (n, m) = op.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, trial as u64));
    let u = gaussian_matrix(n, kappa, &mut rng);
    let v = gaussian_matrix(m, kappa, &mut rng);
    let x = &u * v.transpose();
    let x = &x / x.norm();
    op.apply(&x).norm_squared()
}

/// Closed form for full and weighted observation; otherwise min/max over
/// `trials` random directions. Trial `t` depends only on `(seed, t)`, so a
/// longer run extends a shorter one.
pub fn estimate_restricted_spectrum(
    op: &SamplingOperator,
    kappa: usize,
    trials: usize,
    seed: u64,
) -> Result<SpectrumEstimate> {
    if kappa == 0 || trials == 0 {
        return Err(Error::InvalidArgument(
            "kappa and trials must be >= 1".into(),
        ));
    }
    if let Some((alpha, beta)) = op.exact_spectrum() {
        let method = match op {
            SamplingOperator::Full { .. } => SpectrumMethod::ExactFullObservation,
            _ => SpectrumMethod::ExactWeighted,
        };
        return Ok(SpectrumEstimate {
            alpha,
            beta,
            rank_used: kappa,
            trials: 0,
            method,
        });
    }
    let values: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| spectrum_trial(op, kappa, seed, t))
        .collect();
    let alpha = values.iter().copied().fold(f64::INFINITY, f64::min);
    let beta = values.iter().copied().fold(0.0, f64::max);
    Ok(SpectrumEstimate {
        alpha,
        beta,
        rank_used: kappa,
        trials,
        method: SpectrumMethod::MonteCarlo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::rect_diag;

    fn rand_matrix(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Matrix {
        gaussian_matrix(n, m, rng)
    }

    fn adjoint_gap(op: &SamplingOperator, pairs: usize, seed: u64) -> f64 {
        let (n, m) = op.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let x = rand_matrix(n, m, &mut rng);
            let v = Vector::from_iterator(
                op.measurements(),
                (0..op.measurements()).map(|_| StandardNormal.sample(&mut rng)),
            );
            let lhs = op.apply(&x).dot(&v);
            let rhs = x.dot(&op.adjoint(&v));
            worst = worst.max((lhs - rhs).abs() / (x.norm() * v.norm()));
        }
        worst
    }

    #[test]
    fn gaussian_zero_and_adjoint() {
        let op = SamplingOperator::gaussian(2, 2, 3, 5, DEFAULT_MAX_ENTRIES).unwrap();
        assert_eq!(op.apply(&Matrix::zeros(2, 2)), Vector::zeros(3));
        assert!(adjoint_gap(&op, 10, 1) <= 1e-12);
    }

    #[test]
    fn adjoint_identity_all_operators() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ops = vec![
            SamplingOperator::full(5, 4),
            SamplingOperator::gaussian(5, 4, 30, 1, DEFAULT_MAX_ENTRIES).unwrap(),
            SamplingOperator::weighted(Matrix::from_fn(5, 4, |_, _| rng.random_range(0.5..2.0)))
                .unwrap(),
            SamplingOperator::mask(5, 4, 0.5, 9).unwrap(),
        ];
        for op in &ops {
            assert!(adjoint_gap(op, 50, 2) <= 1e-10, "{}", op.kind());
        }
    }

    #[test]
    fn linearity() {
        let op = SamplingOperator::gaussian(4, 3, 20, 2, DEFAULT_MAX_ENTRIES).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_matrix(4, 3, &mut rng);
        let y = rand_matrix(4, 3, &mut rng);
        let lhs = op.apply(&(&x * 2.5 - &y * 0.75));
        let rhs = op.apply(&x) * 2.5 - op.apply(&y) * 0.75;
        assert!((lhs - &rhs).norm() <= 1e-12 * rhs.norm());
    }

    #[test]
    fn gaussian_memory_guard() {
        let err = SamplingOperator::gaussian(10, 10, 100, 0, 5000).unwrap_err();
        assert!(matches!(
            err,
            Error::MemoryCap {
                requested: 10000,
                cap: 5000
            }
        ));
    }

    #[test]
    fn gaussian_concentration() {
        let op = SamplingOperator::gaussian(40, 40, 2000, 11, DEFAULT_MAX_ENTRIES).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut total = 0.0;
        for _ in 0..50 {
            let x = rand_matrix(40, 2, &mut rng) * rand_matrix(40, 2, &mut rng).transpose();
            total += op.apply(&x).norm_squared() / x.norm_squared();
        }
        let mean = total / 50.0;
        assert!((0.8..=1.2).contains(&mean), "mean {mean}");
    }

    #[test]
    fn gaussian_op_norm_matches_svd() {
        let op = SamplingOperator::gaussian(6, 5, 40, 3, DEFAULT_MAX_ENTRIES).unwrap();
        if let SamplingOperator::Gaussian { sensing, .. } = &op {
            let s = crate::matrix::thin_svd(sensing).unwrap().singulars[0];
            assert!((op.op_norm_sq() - s * s).abs() <= 1e-10 * s * s);
        } else {
            unreachable!()
        }
    }

    #[test]
    fn full_observation_basics() {
        let op = SamplingOperator::full(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(3, 4, &mut rng);
        assert_eq!(op.adjoint(&op.apply(&x)), x);
        let est = estimate_restricted_spectrum(&op, 2, 10, 0).unwrap();
        assert_eq!((est.alpha, est.beta), (1.0, 1.0));
        assert_eq!(est.method, SpectrumMethod::ExactFullObservation);
        let omega = Vector::from_iterator(12, (0..12).map(|_| StandardNormal.sample(&mut rng)));
        let inst = RecoveryInstance::from_parts(
            Matrix::zeros(3, 4),
            Arc::new(op),
            omega.clone(),
            0,
            0,
            NoiseSpec::None,
        )
        .unwrap();
        let reshaped = Matrix::from_column_slice(3, 4, omega.as_slice());
        let direct = crate::matrix::thin_svd(&reshaped).unwrap().singulars[0];
        assert!((inst.noise_adjoint_norm() - direct).abs() <= 1e-10 * direct);
    }

    #[test]
    fn weighted_operator() {
        let ones = SamplingOperator::weighted(Matrix::from_element(3, 3, 1.0)).unwrap();
        let full = SamplingOperator::full(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(3, 3, &mut rng);
        assert_eq!(ones.apply(&x), full.apply(&x));
        let h = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let est =
            estimate_restricted_spectrum(&SamplingOperator::weighted(h).unwrap(), 1, 5, 0).unwrap();
        assert_eq!((est.alpha, est.beta), (1.0, 4.0));
        assert!(SamplingOperator::weighted(rect_diag(2, 2, &[1.0, 0.0])).is_err());
        let op = OperatorSpec::Weighted {
            low: 0.9,
            high: 1.1,
        }
        .build(20, 20, 8)
        .unwrap();
        let (lo, hi) = op.exact_spectrum().unwrap();
        if let SamplingOperator::Weighted { weights } = &op {
            let wmin = weights.iter().copied().fold(f64::INFINITY, f64::min);
            let wmax = weights.iter().copied().fold(0.0, f64::max);
            assert_eq!(lo, wmin * wmin);
            assert_eq!(hi, wmax * wmax);
        }
        // (1.1/0.9)^2 ~ 1.49: the extremes of a 400-entry draw sit near the range ends
        assert!(hi / lo > 1.38 && hi / lo <= (1.1f64 / 0.9).powi(2));
        let narrow = OperatorSpec::Weighted {
            low: 0.95,
            high: 1.05,
        }
        .build(20, 20, 8)
        .unwrap();
        let (lo, hi) = narrow.exact_spectrum().unwrap();
        assert!(hi / lo <= 1.38);
    }

    #[test]
    fn instance_generation() {
        let clean =
            generate_instance(12, 12, 2, &OperatorSpec::gaussian(60), &NoiseSpec::None, 3).unwrap();
        assert_eq!(clean.y, clean.operator.apply(&clean.m_star));
        assert_eq!(clean.noise_adjoint_norm(), 0.0);
        assert!(generate_instance(
            12,
            12,
            4,
            &OperatorSpec::FullObservation,
            &NoiseSpec::None,
            0
        )
        .is_err());
        let a = generate_instance(
            8,
            8,
            2,
            &OperatorSpec::gaussian(30),
            &NoiseSpec::Relative { ratio: 0.1 },
            9,
        )
        .unwrap();
        let b = generate_instance(
            8,
            8,
            2,
            &OperatorSpec::gaussian(30),
            &NoiseSpec::Relative { ratio: 0.1 },
            9,
        )
        .unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.m_star, b.m_star);
    }

    #[test]
    fn relative_noise_matches_ratio_at_benchmark_size() {
        let inst = generate_instance(
            100,
            100,
            5,
            &OperatorSpec::gaussian(1950),
            &NoiseSpec::Relative { ratio: 0.1 },
            2024,
        )
        .unwrap();
        let ratio = inst.omega.norm() / inst.operator.apply(&inst.m_star).norm();
        assert!((0.095..=0.105).contains(&ratio), "{ratio}");
    }

    #[test]
    fn gaussian_restricted_spectrum() {
        let op = SamplingOperator::gaussian(40, 40, 2000, 21, DEFAULT_MAX_ENTRIES).unwrap();
        let est = estimate_restricted_spectrum(&op, 8, 200, 4).unwrap();
        assert!(est.alpha <= est.beta);
        assert!(est.alpha >= 0.5 && est.beta <= 1.5, "{est:?}");
        // longer runs extend shorter ones
        let short = estimate_restricted_spectrum(&op, 8, 50, 4).unwrap();
        assert!(est.alpha <= short.alpha && est.beta >= short.beta);
    }

    #[test]
    fn noise_adjoint_scale() {
        // realized ||A*(omega)|| concentrates near sigma (sqrt n + sqrt m) for N(0,1/p) sensing
        let sigma = 0.3;
        let inst = generate_instance(
            40,
            40,
            2,
            &OperatorSpec::gaussian(2000),
            &NoiseSpec::Absolute { sigma },
            6,
        )
        .unwrap();
        let raw = inst.raw_noise_adjoint_norm();
        let reference = sigma * (40f64.sqrt() * 2.0);
        assert!(
            raw >= reference / 3.0 && raw <= reference * 3.0,
            "{raw} vs {reference}"
        );
        assert!((inst.noise_adjoint_norm() - raw / 2000.0).abs() <= 1e-12 * raw);
        // the loss-scaled norm falls like 1/p at fixed sigma
        let small_p = generate_instance(
            40,
            40,
            2,
            &OperatorSpec::gaussian(500),
            &NoiseSpec::Absolute { sigma },
            6,
        )
        .unwrap();
        let ratio = small_p.noise_adjoint_norm() / inst.noise_adjoint_norm();
        assert!((ratio > 4.0 / 3.0) && (ratio < 4.0 * 3.0), "{ratio}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for spec in [
            OperatorSpec::gaussian(20),
            OperatorSpec::FullObservation,
            OperatorSpec::Weighted {
                low: 0.5,
                high: 1.5,
            },
            OperatorSpec::Mask { probability: 0.6 },
        ] {
            let inst =
                generate_instance(8, 8, 2, &spec, &NoiseSpec::Relative { ratio: 0.1 }, 4).unwrap();
            let path = dir.path().join(inst.operator.kind());
            inst.save(&path).unwrap();
            let back = RecoveryInstance::load(&path).unwrap();
            assert_eq!(back.m_star, inst.m_star);
            assert_eq!(back.y, inst.y);
            assert_eq!(back.noise, inst.noise);
            let x = Matrix::from_fn(8, 8, |i, j| (i * 8 + j) as f64);
            assert_eq!(back.operator.apply(&x), inst.operator.apply(&x));
        }
    }
}
