mod common;

use curriculum_bo::boxopt::BoxBounds;
use curriculum_bo::gp::{fit, KernelParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn point() -> impl Strategy<Value = Vec<f64>> {
    (150.0..250.0f64, 330.0..450.0f64, 730.0..830.0f64).prop_map(|(a, b, c)| vec![a, b, c])
}

fn dataset(max: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| (prop::collection::vec(point(), n), prop::collection::vec(-500.0..1000.0f64, n)))
}

fn fd_check(model: &curriculum_bo::gp::GpModel, q: &[f64]) {
    let g = model.posterior_gradient(q).unwrap();
    let h = 1e-4;
    for d in 0..3 {
        let mut up = q.to_vec();
        up[d] += h;
        let mut dn = q.to_vec();
        dn[d] -= h;
        let pu = model.posterior(&up).unwrap();
        let pd = model.posterior(&dn).unwrap();
        let fm = (pu.mean - pd.mean) / (2.0 * h);
        let fs = (pu.std - pd.std) / (2.0 * h);
        let scale = model.y_std();
        assert!((g.dmean[d] - fm).abs() <= 1e-4 * scale.max(fm.abs()), "dmean {} vs {fm}", g.dmean[d]);
        if !g.degenerate {
            assert!((g.dstd[d] - fs).abs() <= 1e-4 * scale.max(fs.abs()), "dstd {} vs {fs}", g.dstd[d]);
        }
    }
}

#[test]
fn single_point_gradient_matches_finite_differences() {
    let model = fit(&[vec![200.0, 400.0, 780.0]], &[500.0], &KernelParams::paper(), None).unwrap();
    fd_check(&model, &[200.0, 400.0, 780.0]);
    fd_check(&model, &[205.0, 396.0, 790.0]);
}

#[test]
fn five_point_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = BoxBounds::paper();
    let pt = |rng: &mut ChaCha8Rng| -> Vec<f64> { b.lower.iter().zip(&b.upper).map(|(l, u)| rng.random_range(*l..*u)).collect() };
    let xs: Vec<Vec<f64>> = (0..5).map(|_| pt(&mut rng)).collect();
    let ys: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1000.0)).collect();
    let model = fit(&xs, &ys, &KernelParams::paper(), None).unwrap();
    for _ in 0..20 {
        fd_check(&model, &pt(&mut rng));
    }
}

#[test]
fn three_point_posterior_matches_direct_inverse() {
    let xs = vec![vec![160.0, 350.0, 740.0], vec![200.0, 390.0, 780.0], vec![240.0, 440.0, 820.0]];
    let ys = vec![610.0, 840.0, 700.0];
    let k = KernelParams::paper();
    let model = fit(&xs, &ys, &k, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let q = vec![rng.random_range(150.0..250.0), rng.random_range(330.0..450.0), rng.random_range(730.0..830.0)];
        let p = model.posterior(&q).unwrap();
        let (m, s) = common::gp_posterior_ref(&xs, &ys, &k.length_scales, 1.0, 0.01, &q);
        assert!((p.mean - m).abs() < 1e-8 * model.y_std());
        assert!((p.std - s).abs() < 1e-8 * model.y_std());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn std_is_bounded_by_prior((xs, ys) in dataset(10), q in point()) {
        let k = KernelParams::paper();
        let m = fit(&xs, &ys, &k, None).unwrap();
        let p = m.posterior(&q).unwrap();
        prop_assert!(p.std >= 0.0);
        prop_assert!(p.std <= k.signal_variance.sqrt() * m.y_std() + 1e-9);
    }

    #[test]
    fn cholesky_reconstructs_gram_plus_noise((xs, ys) in dataset(10)) {
        let k = KernelParams::paper();
        let m = fit(&xs, &ys, &k, None).unwrap();
        let l = m.cholesky_factor();
        let rebuilt = &l * l.transpose();
        let mut g = curriculum_bo::gp::gram_matrix(&xs, &k);
        for i in 0..xs.len() {
            g[(i, i)] += k.noise_variance + m.jitter();
            prop_assert!(l[(i, i)] > 0.0);
            for j in (i + 1)..xs.len() {
                prop_assert_eq!(l[(i, j)], 0.0);
            }
        }
        let err = (&rebuilt - &g).norm() / g.norm();
        prop_assert!(err <= 1e-10, "relative error {}", err);
    }

    #[test]
    fn noiseless_observation_pins_std_and_leaves_far_field((xs, ys) in dataset(6), q in point(), yq in 0.0..1000.0f64) {
        let k = KernelParams { noise_variance: 0.0, ..KernelParams::paper() };
        let base = fit(&xs, &ys, &k, None).unwrap();
        let mut xs2 = xs.clone();
        xs2.push(q.clone());
        let mut ys2 = ys.clone();
        ys2.push(yq);
        let m2 = fit(&xs2, &ys2, &k, None).unwrap();
        if m2.jitter() == 0.0 {
            prop_assert!(m2.posterior(&q).unwrap().std <= 1e-5 * m2.y_std());
        }
        // far from everything both models revert to their priors
        let far = vec![q[0] + 2000.0, q[1] + 2000.0, q[2] + 2000.0];
        let a = base.posterior(&far).unwrap();
        let b = m2.posterior(&far).unwrap();
        prop_assert!((a.std / base.y_std() - b.std / m2.y_std()).abs() <= 1e-3);
    }

    #[test]
    fn fit_is_deterministic((xs, ys) in dataset(8), q in point()) {
        let k = KernelParams::paper();
        let a = fit(&xs, &ys, &k, None).unwrap().posterior_gradient(&q).unwrap();
        let b = fit(&xs, &ys, &k, None).unwrap().posterior_gradient(&q).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn far_field_reverts_to_prior((xs, ys) in dataset(8)) {
        let m = fit(&xs, &ys, &KernelParams::paper(), None).unwrap();
        let far = vec![5000.0, 5000.0, 5000.0];
        let p = m.posterior(&far).unwrap();
        prop_assert!((p.mean - m.y_mean()).abs() <= 1e-3 * m.y_std());
        prop_assert!((p.std - m.y_std()).abs() <= 1e-3 * m.y_std());
        let g = m.posterior_gradient(&far).unwrap();
        prop_assert!(g.dmean.iter().chain(&g.dstd).all(|v| v.abs() < 1e-6));
    }
}
