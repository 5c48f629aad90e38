//! Thin SVD and orthogonal Procrustes: recover a hidden rotation between two
//! factor matrices and measure their distance modulo rotations.

use lowrank::matrix::{orbit_distance, procrustes, thin_svd, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> lowrank::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = Matrix::from_fn(30, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = Matrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal))
        .qr()
        .q();
    let a = &b * &q;

    let svd = thin_svd(&b)?;
    println!("singular values of B: {:.4?}", svd.singulars.as_slice());

    let fit = procrustes(&a, &b)?;
    println!(
        "rotation error ||R - Q||_F = {:.2e}",
        (&fit.rotation - &q).norm()
    );
    println!("distance after alignment   = {:.2e}", fit.distance);

    let noisy = &a + Matrix::from_fn(30, 4, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
    println!(
        "orbit distance with noise  = {:.4}",
        orbit_distance(&noisy, &b)?
    );
    Ok(())
}
