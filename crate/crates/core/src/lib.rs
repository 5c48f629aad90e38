//! Noisy low-rank matrix recovery through the squared Frobenius-norm
//! regularized factorization
//!
//! ```text
//! min_{U,V}  f(U V^T) + (lambda/2) (||U||_F^2 + ||V||_F^2)
//! ```
//!
//! with an accelerated alternating minimization solver, a proximal-gradient
//! nuclear-norm baseline, and numeric audits of the error bounds, critical
//! point structure and KL behaviour of the factored objective.
//!
//! Module map:
//! - [`matrix`]: SVD, Procrustes, block projections, factor stacking.
//! - [`sampling`]: observation operators, instance generation, restricted spectrum.
//! - [`objective`]: loss, factored objective, Hessian forms and eigen-probe.
//! - [`solvers`]: the alternating solver and the nuclear-norm baseline.
//! - [`theory`]: audits that return [`theory::Check`] records.
//! - [`experiment`]: sweeps, convergence runs and CSV/JSON output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod matrix;
pub mod objective;
pub mod sampling;
pub mod solvers;
pub mod theory;

pub use error::{Error, Result};
pub use matrix::{FactorPair, Matrix, Vector};

/// Embedded in every artifact the experiment layer writes.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
