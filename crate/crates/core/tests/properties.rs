use std::sync::Arc;

use lowrank::matrix::{
    p_off, p_on, procrustes, sym_eigenvalues, thin_svd, FactorPair, Matrix, Vector,
};
use lowrank::objective::{
    curvature_gap, xi_from_gradient, DiagonalObjective, LeastSquaresLoss, RegularizedObjective,
    SmoothLoss,
};
use lowrank::sampling::{
    estimate_restricted_spectrum, generate_instance, NoiseSpec, OperatorSpec, SamplingOperator,
};
use lowrank::solvers::{aal_solve, init_spectral, AalConfig, Schedule};
use lowrank::theory::{
    balance_audit, counterexample_sequence, gamma_hat, global_set_fullobs, kl_probe, KlProbeConfig,
    Verdict,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    })
}

fn orthogonal(k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    gaussian(k, k, rng).qr().q()
}

fn operator(kind: u8, n: usize, m: usize, seed: u64) -> SamplingOperator {
    match kind % 3 {
        0 => SamplingOperator::full(n, m),
        1 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            SamplingOperator::weighted(Matrix::from_fn(n, m, |_, _| rng.random_range(0.5..1.5)))
                .unwrap()
        }
        _ => SamplingOperator::gaussian(n, m, n * m / 2 + 1, seed, usize::MAX).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn singular_values_match_gram_eigenvalues(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(rows, cols, &mut rng);
        let svd = thin_svd(&x).unwrap();
        let mut eig: Vec<f64> = sym_eigenvalues(&(x.transpose() * &x)).iter().map(|e| e.max(0.0).sqrt()).collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let top = svd.singulars[0];
        for (s, e) in svd.singulars.iter().zip(eig.iter()) {
            prop_assert!((s - e).abs() <= 1e-8 * top.max(1.0), "{} vs {}", s, e);
        }
    }

    #[test]
    fn procrustes_beats_random_rotations(rows in 2usize..7, k in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(rows, k, &mut rng);
        let b = gaussian(rows, k, &mut rng);
        let best = procrustes(&a, &b).unwrap();
        let d = (&a - &b * &best.rotation).norm();
        for _ in 0..200 {
            let r = orthogonal(k, &mut rng);
            prop_assert!(d <= (&a - &b * r).norm() + 1e-12);
        }
    }

    #[test]
    fn block_projections(n in 1usize..5, m in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(n + m, n + m, &mut rng);
        let on = p_on(&a, n).unwrap();
        let off = p_off(&a, n).unwrap();
        prop_assert_eq!(&p_on(&on, n).unwrap(), &on);
        prop_assert_eq!(&p_off(&off, n).unwrap(), &off);
        prop_assert_eq!(on.dot(&off), 0.0);
        prop_assert!((&on + &off - &a).norm() == 0.0);
    }

    #[test]
    fn adjoint_identity_and_linearity(kind in 0u8..3, n in 2usize..7, m in 2usize..7, seed in any::<u64>()) {
        let op = operator(kind, n, m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = gaussian(n, m, &mut rng);
        let z = gaussian(n, m, &mut rng);
        let v = Vector::from_fn(op.measurements(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let lhs = op.apply(&x).dot(&v);
        let rhs = x.dot(&op.adjoint(&v));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * x.norm() * v.norm());
        let comb = op.apply(&(&x * 2.0 - &z));
        let sep = op.apply(&x) * 2.0 - op.apply(&z);
        prop_assert!((comb - &sep).norm() <= 1e-12 * sep.norm().max(1.0));
    }

    #[test]
    fn spectrum_estimates_widen_with_trials(seed in any::<u64>()) {
        let op = SamplingOperator::gaussian(6, 6, 30, seed, usize::MAX).unwrap();
        let short = estimate_restricted_spectrum(&op, 2, 10, seed).unwrap();
        let long = estimate_restricted_spectrum(&op, 2, 40, seed).unwrap();
        prop_assert!(long.alpha <= short.alpha && long.beta >= short.beta);
        prop_assert_eq!(short, estimate_restricted_spectrum(&op, 2, 10, seed).unwrap());
    }

    #[test]
    fn gradient_matches_central_differences(kind in 0u8..3, r in 1usize..3, lambda in 0.01f64..2.0, seed in any::<u64>()) {
        let (n, m) = (5, 4);
        let op = Arc::new(operator(kind, n, m, seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let y = op.apply(&gaussian(n, m, &mut rng));
        let obj = RegularizedObjective::new(LeastSquaresLoss::new(op, y).unwrap(), lambda, r).unwrap();
        let fp = FactorPair::new(gaussian(n, r, &mut rng), gaussian(m, r, &mut rng)).unwrap();
        let g = obj.gradient(&fp).to_flat();
        let flat = fp.to_flat();
        let h = 1e-5 * flat.norm().max(1.0);
        let fd = Vector::from_fn(flat.len(), |i, _| {
            let mut p = flat.clone();
            let mut q = flat.clone();
            p[i] += h;
            q[i] -= h;
            (obj.value(&FactorPair::from_flat(&p, n, m, r)) - obj.value(&FactorPair::from_flat(&q, n, m, r))) / (2.0 * h)
        });
        prop_assert!((&g - &fd).norm() <= 1e-6 * g.norm().max(1.0));

        // stacked gradient equals Xi(UV^T) W
        let xi = xi_from_gradient(&obj.loss.gradient(&fp.product()), lambda);
        let stacked = obj.gradient(&fp).stack();
        prop_assert!((xi * fp.stack() - &stacked).norm() <= 1e-12 * stacked.norm().max(1.0));
    }

    #[test]
    fn hessian_form_is_bilinear(kind in 0u8..3, seed in any::<u64>()) {
        let (n, m, r) = (4, 5, 2);
        let op = Arc::new(operator(kind, n, m, seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let y = op.apply(&gaussian(n, m, &mut rng));
        let obj = RegularizedObjective::new(LeastSquaresLoss::new(op, y).unwrap(), 0.3, r).unwrap();
        let fp = FactorPair::new(gaussian(n, r, &mut rng), gaussian(m, r, &mut rng)).unwrap();
        let d1 = FactorPair::new(gaussian(n, r, &mut rng), gaussian(m, r, &mut rng)).unwrap();
        let d2 = FactorPair::new(gaussian(n, r, &mut rng), gaussian(m, r, &mut rng)).unwrap();
        let sum = d1.add_scaled(1.0, &d2);
        let polar = 0.5 * (obj.hess_quadform(&fp, &sum) - obj.hess_quadform(&fp, &d1) - obj.hess_quadform(&fp, &d2));
        let bilinear = obj.hess_apply(&fp, &d1).dot(&d2);
        let scale = obj.hess_quadform(&fp, &d1).abs() + obj.hess_quadform(&fp, &d2).abs() + 1.0;
        prop_assert!((polar - bilinear).abs() <= 1e-10 * scale);
    }

    #[test]
    fn full_observation_curvature_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = LeastSquaresLoss::full_observation(&gaussian(5, 6, &mut rng));
        let low = |rng: &mut ChaCha8Rng| gaussian(5, 2, rng) * gaussian(6, 2, rng).transpose();
        let (x, y, z) = (low(&mut rng), low(&mut rng), low(&mut rng));
        let (lhs, rhs) = curvature_gap(&loss, 1.0, 1.0, &x, &y, &z);
        prop_assert!(lhs <= 1e-12 * y.norm() * z.norm() && rhs == 0.0);
    }

    #[test]
    fn gamma1_depends_only_on_ratio(alpha in 0.1f64..10.0, ratio in 1.0f64..2.0, t in 0.01f64..100.0) {
        let a = gamma_hat(alpha, ratio * alpha).unwrap();
        let b = gamma_hat(t * alpha, t * ratio * alpha).unwrap();
        prop_assert!((a.gamma1 - b.gamma1).abs() <= 1e-12 * a.gamma1.abs().max(1.0));
        prop_assert_eq!(a.admissible, b.admissible);
        if let Some(gh) = a.gamma_hat {
            prop_assert!((gh - a.gamma2 / a.gamma1).abs() <= 1e-12 * gh);
        }
    }

    #[test]
    fn global_set_is_optimal_nearby(seed in any::<u64>(), r in 1usize..4, lambda in 0.05f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sigma: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..4.0)).collect();
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(sigma[r - 1] > sigma[r] + 1e-6);
        let diag = DiagonalObjective::new(5, 6, sigma, lambda, r).unwrap();
        let (fp, value) = global_set_fullobs(&diag).unwrap();
        let obj = diag.objective();
        for _ in 0..100 {
            let d = FactorPair::new(gaussian(5, r, &mut rng), gaussian(6, r, &mut rng)).unwrap();
            let radius = rng.random_range(0.0..0.1);
            let p = fp.add_scaled(radius / d.norm(), &d);
            prop_assert!(obj.value(&p) >= value - 1e-12);
        }
    }

    #[test]
    fn no_pass_without_verified_premises(seed in any::<u64>(), lambda in 0.1f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sigma: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..5.0)).collect();
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let diag = DiagonalObjective::new(4, 4, sigma, lambda, 2).unwrap();
        let center = FactorPair::new(gaussian(4, 2, &mut rng), gaussian(4, 2, &mut rng)).unwrap();
        let probe = kl_probe(&diag, &center, &KlProbeConfig { samples: 20, ..KlProbeConfig::default() }).unwrap();
        prop_assert!(probe.check.verdict != Verdict::Pass || probe.check.premises_verified);
        // an arbitrary center is not globally optimal
        prop_assert!(probe.check.verdict == Verdict::NotApplicable);
        let c = balance_audit(&center).unwrap();
        prop_assert!(c.premises_verified);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn kl_modulus_is_rotation_invariant(seed in any::<u64>()) {
        let diag = DiagonalObjective::new(5, 5, vec![6.0, 5.0, 3.0, 1.0, 0.5], 2.0, 3).unwrap();
        let (center, _) = global_set_fullobs(&diag).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = KlProbeConfig { samples: 200, seed, ..KlProbeConfig::default() };
        let base = kl_probe(&diag, &center, &cfg).unwrap();
        let rotated = kl_probe(&diag, &center.right_multiply(&orthogonal(3, &mut rng)), &cfg).unwrap();
        prop_assert!(base.check.verdict == Verdict::Pass && rotated.check.verdict == Verdict::Pass);
        prop_assert!((rotated.eta_hat / base.eta_hat - 1.0).abs() <= 0.1, "{} vs {}", rotated.eta_hat, base.eta_hat);
    }

    #[test]
    fn aal_descends_and_balances(seed in any::<u64>()) {
        let inst = generate_instance(12, 12, 2, &OperatorSpec::FullObservation, &NoiseSpec::Relative { ratio: 0.05 }, seed).unwrap();
        let obj = RegularizedObjective::from_instance(&inst, 1.5 * inst.noise_adjoint_norm(), 3).unwrap();
        let cfg = AalConfig { schedule: Schedule::None, epsilon: 1e-10, max_iters: 50_000, record_trace: true, ..AalConfig::default() };
        let out = aal_solve(&obj, &cfg, init_spectral(&obj.loss, 3).unwrap()).unwrap();
        for w in out.trace.records.windows(2) {
            prop_assert!(w[1].obj <= w[0].obj + 1e-12 * w[0].obj.abs());
        }
        let gu = out.fp.u.tr_mul(&out.fp.u);
        let gv = out.fp.v.tr_mul(&out.fp.v);
        prop_assert!((&gu - &gv).norm() <= 1e-6 * gu.norm());
        let audit = balance_audit(&out.fp).unwrap();
        prop_assert!(audit.passed(), "{:?}", audit);
    }
}

#[test]
fn counterexample_gap_positive() {
    let rep = counterexample_sequence(2.0, 1.0, 200).unwrap();
    assert!(rep.points.iter().all(|p| p.gap > 0.0));
}
