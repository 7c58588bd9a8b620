use gradguide::dataset::{
    empirical_stats, generate_subspace, Dataset, GaussianDist, LatentDist, SubspaceBasis,
};
use gradguide::experiments::{normal_vector, random_gaussian_in};
use gradguide::guidance::{g_loss, g_naive, guided_score, beta, BetaRule, GuidanceSpec};
use gradguide::objective::{regularized_opt, theta_with_ratio, Objective};
use gradguide::optimizer::{exact_mean_recursion, run_alg1, run_alg2, Alg2Rules, OptConfig};
use gradguide::schedule::NoiseSchedule;
use gradguide::score::LinearScoreModel;
use gradguide::verify::conditional_score_oracle;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn knots() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.05f64..2.0, 0.1f64..3.0), 1..6).prop_map(|steps| {
        let mut t = 0.0;
        let mut out = vec![(0.0, steps[0].1)];
        for (dt, q) in steps {
            t += dt;
            out.push((t, q));
        }
        out
    })
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn variance_preserving(q0 in 0.01f64..5.0, frac in 0.0f64..=1.0) {
        let s = NoiseSchedule::constant(q0, 10.0).unwrap();
        let t = 10.0 * frac;
        let (a, h) = s.alpha_h(t).unwrap();
        prop_assert!((a * a + h - 1.0).abs() < 1e-12);
        prop_assert!((a - (-q0 * t / 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn tabulated_variance_preserving_and_monotone(k in knots(), f1 in 0.0f64..1.0, f2 in 0.0f64..1.0) {
        let horizon = k.last().unwrap().0;
        let s = NoiseSchedule::tabulated(k, horizon).unwrap();
        let (t1, t2) = (horizon * f1.min(f2), horizon * f1.max(f2));
        let (a1, h1) = s.alpha_h(t1).unwrap();
        prop_assert!((a1 * a1 + h1 - 1.0).abs() < 1e-12);
        if t2 - t1 > 1e-9 {
            prop_assert!(s.alpha(t1).unwrap() > s.alpha(t2).unwrap());
        }
    }

    #[test]
    fn subspace_samples_stay_on_support(d in 1usize..6, extra in 0usize..6, seed in any::<u64>()) {
        let basis = SubspaceBasis::random(d + extra, d, seed).unwrap();
        let data = generate_subspace(&basis, &LatentDist::StdNormal, 50, seed ^ 1).unwrap();
        for i in 0..data.len() {
            prop_assert!(basis.orthogonal(&data.sample(i)).norm() < 1e-10);
        }
    }

    #[test]
    fn basis_generation_is_reproducible(d in 1usize..6, extra in 0usize..6, seed in any::<u64>()) {
        let a = SubspaceBasis::random(d + extra, d, seed).unwrap();
        let b = SubspaceBasis::random(d + extra, d, seed).unwrap();
        prop_assert_eq!(a.matrix(), b.matrix());
    }

    #[test]
    fn stats_permutation_invariant(seed in any::<u64>(), rot in 1usize..40) {
        let dist = random_gaussian_in(4, 0.1, 1.0, seed).unwrap();
        let data = gradguide::dataset::generate_gaussian(&dist, 40, seed ^ 7).unwrap();
        let n = data.len();
        let mut perm: Vec<usize> = (0..n).map(|i| (i * 7 + rot) % n).collect();
        perm.reverse();
        let shuffled = DMatrix::from_fn(4, n, |i, j| data.samples()[(i, perm[j])]);
        let a = empirical_stats(&data);
        let b = empirical_stats(&Dataset::new(shuffled, None).unwrap());
        prop_assert!((a.mean - b.mean).norm() < 1e-12);
        prop_assert!((a.cov - b.cov).norm() < 1e-12);
    }

    #[test]
    fn tweedie_matches_gaussian_conditional(seed in any::<u64>(), t in 0.01f64..10.0) {
        let s = NoiseSchedule::default();
        let stats = random_gaussian_in(5, 0.1, 2.0, seed).unwrap();
        let model = LinearScoreModel::full_linear(stats.clone()).unwrap();
        let x = normal_vector(5, seed, 1) * 2.0;
        let (a, h) = s.alpha_h(t).unwrap();
        let k = &stats.cov * (a * a) + DMatrix::identity(5, 5) * h;
        let expected = &stats.mean + &stats.cov * k.lu().solve(&(&x - &stats.mean * a)).unwrap() * a;
        let got = model.tweedie_mean(&x, t, &s).unwrap();
        prop_assert!((&got - &expected).norm() <= 1e-10 * expected.norm().max(1.0));
    }

    #[test]
    fn full_linear_agrees_with_subspace_form(seed in any::<u64>(), t in 0.01f64..10.0) {
        let s = NoiseSchedule::default();
        let basis = SubspaceBasis::random(7, 3, seed).unwrap();
        let m = basis.project(&normal_vector(7, seed, 2));
        let full = LinearScoreModel::full_linear(GaussianDist::new(m.clone(), basis.projector()).unwrap()).unwrap();
        let sub = LinearScoreModel::subspace(basis, m).unwrap();
        let x = normal_vector(7, seed, 3);
        let a = full.evaluate(&x, t, &s).unwrap();
        let b = sub.evaluate(&x, t, &s).unwrap();
        prop_assert!((&a - &b).norm() <= 1e-8 * a.norm().max(1.0));
    }

    #[test]
    fn conditional_score_identity(seed in any::<u64>(), t in 0.01f64..10.0, y in -5.0f64..5.0, sigma in 0.2f64..3.0) {
        let s = NoiseSchedule::default();
        let stats = random_gaussian_in(6, 0.1, 2.0, seed).unwrap();
        let model = LinearScoreModel::full_linear(stats.clone()).unwrap();
        let g = normal_vector(6, seed, 4);
        let x = normal_vector(6, seed, 5) * 2.0;
        let spec = GuidanceSpec::loss(g.clone(), y, sigma, BetaRule::GaussianTheory);
        let got = guided_score(&spec, &model, &x, t, &s).unwrap();
        let (a, h) = s.alpha_h(t).unwrap();
        let want = conditional_score_oracle(&stats, &g, y, sigma, &x, a, h).unwrap();
        prop_assert!((&got - &want).norm() <= 1e-9 * want.norm());
    }

    #[test]
    fn loss_guidance_is_faithful(seed in any::<u64>(), t in 0.01f64..10.0, y in -5.0f64..5.0) {
        let s = NoiseSchedule::default();
        let basis = SubspaceBasis::random(12, 3, seed).unwrap();
        let model = LinearScoreModel::subspace(basis.clone(), normal_vector(12, seed, 6)).unwrap();
        let g = normal_vector(12, seed, 7);
        let x = normal_vector(12, seed, 8);
        let spec = GuidanceSpec::loss(g, y, 1.0, BetaRule::SubspaceTheory);
        let gl = g_loss(&spec, &model, &x, t, &s).unwrap();
        if gl.norm() > 0.0 {
            prop_assert!(basis.orthogonal(&gl).norm() < 1e-10 * gl.norm());
        }
    }

    #[test]
    fn loss_guidance_affine_in_target(seed in any::<u64>(), t in 0.01f64..10.0, y in -5.0f64..5.0) {
        let s = NoiseSchedule::default();
        let stats = random_gaussian_in(5, 0.1, 2.0, seed).unwrap();
        let model = LinearScoreModel::full_linear(stats).unwrap();
        let g = normal_vector(5, seed, 9);
        let x = normal_vector(5, seed, 10);
        let at = |y: f64| g_loss(&GuidanceSpec::loss(g.clone(), y, 1.0, BetaRule::GaussianTheory), &model, &x, t, &s).unwrap();
        let spec = GuidanceSpec::loss(g.clone(), y, 1.0, BetaRule::GaussianTheory);
        let b = beta(&spec, &model, t, &s).unwrap();
        let slope = model.tweedie_jacobian_apply(&g, t, &s).unwrap() * (2.0 * b);
        let diff = at(y + 1.0) - at(y);
        prop_assert!((&diff - &slope).norm() <= 1e-10 * slope.norm().max(1e-300));
    }

    #[test]
    fn naive_guidance_parallel_to_gradient(seed in any::<u64>(), t in 0.01f64..10.0, y in -5.0f64..5.0) {
        let s = NoiseSchedule::default();
        let basis = SubspaceBasis::random(8, 2, seed).unwrap();
        let model = LinearScoreModel::subspace(basis, DVector::zeros(8)).unwrap();
        let g = normal_vector(8, seed, 11);
        let x = normal_vector(8, seed, 12);
        let out = g_naive(&GuidanceSpec::naive(g.clone(), y, 1.0, BetaRule::SubspaceTheory), &model, &x, t, &s).unwrap();
        if out.norm() > 0.0 {
            let cos = out.dot(&g) / (out.norm() * g.norm());
            prop_assert!((cos.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>(), kind in 0usize..3) {
        let theta = normal_vector(5, seed, 13);
        let obj = match kind {
            0 => Objective::linear(&theta),
            1 => Objective::quad_scalar(&theta, 3.0, 10.0),
            _ => Objective::dist_norm(&theta, 5.0, 0.5),
        };
        let x = normal_vector(5, seed, 14) * 2.0;
        let g = obj.grad(&x).unwrap();
        let eps = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (obj.value(&xp) - obj.value(&xm)) / (2.0 * eps);
            prop_assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "coordinate {}: fd {} vs {}", i, fd, g[i]);
        }
    }

    #[test]
    fn regularized_optimum_is_stationary(seed in any::<u64>(), kind in 0usize..3, lambda in 0.5f64..10.0) {
        let basis = SubspaceBasis::random(8, 3, seed).unwrap();
        let latent = random_gaussian_in(3, 0.2, 1.5, seed ^ 3).unwrap();
        let a = basis.matrix();
        let stats = GaussianDist::new(a * &latent.mean, a * &latent.cov * a.transpose()).unwrap();
        let theta = normal_vector(8, seed, 15);
        let obj = match kind {
            0 => Objective::linear(&theta),
            1 => Objective::quad_scalar(&theta, 3.0, 10.0),
            _ => Objective::dist_norm(&(&theta * 3.0), 5.0, 0.5),
        };
        let x = regularized_opt(&obj, &stats, lambda, Some(&basis)).unwrap();
        let at = a.transpose();
        let inv = latent.cov.clone().try_inverse().unwrap();
        let resid = &at * obj.grad(&x).unwrap() - inv * (&at * (&x - &stats.mean)) * lambda;
        prop_assert!(resid.norm() < 1e-8, "residual {}", resid.norm());
        prop_assert!(basis.orthogonal(&(&x - &stats.mean)).norm() < 1e-10);
    }

    #[test]
    fn regularization_only_hurts(seed in any::<u64>(), kind in 0usize..3) {
        let stats = random_gaussian_in(5, 0.2, 1.5, seed).unwrap();
        let theta = normal_vector(5, seed, 16);
        let obj = match kind {
            0 => Objective::linear(&theta),
            1 => Objective::quad_scalar(&theta, 3.0, 10.0),
            _ => Objective::dist_norm(&(&theta * 3.0), 5.0, 0.5),
        };
        let vals: Vec<f64> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&l| obj.value(&regularized_opt(&obj, &stats, l, None).unwrap()))
            .collect();
        prop_assert!(vals[0] + 1e-9 >= vals[1] && vals[1] + 1e-9 >= vals[2], "{:?}", vals);
    }
}

proptest! {
    #![proptest_config(cfg(16))]

    #[test]
    fn alg1_never_modifies_model(seed in any::<u64>()) {
        let basis = SubspaceBasis::random(6, 2, seed).unwrap();
        let model = LinearScoreModel::subspace(basis.clone(), normal_vector(6, seed, 17)).unwrap();
        let obj = Objective::quad_scalar(&theta_with_ratio(&basis, 2.0, seed).unwrap(), 3.0, 10.0);
        let c = OptConfig { rounds: 4, lambda: 5.0, exact_mean: true, ..OptConfig::default() };
        let out = run_alg1(&model, &obj, &c, &NoiseSchedule::default(), seed).unwrap();
        prop_assert_eq!(&out.model, &model);
    }

    #[test]
    fn alg2_only_moves_the_bias(seed in any::<u64>()) {
        let stats = random_gaussian_in(4, 0.2, 1.5, seed).unwrap();
        let model = LinearScoreModel::frozen_cov(stats.clone(), stats.mean.clone()).unwrap();
        let obj = Objective::quad_scalar(&normal_vector(4, seed, 18), 3.0, 10.0);
        let c = OptConfig { rounds: 5, exact_mean: true, alg2: Some(Alg2Rules::default()), ..OptConfig::default() };
        let out = run_alg2(&model, &obj, &c, &NoiseSchedule::default(), seed).unwrap();
        prop_assert_eq!(out.model.implied_cov(), model.implied_cov());
        prop_assert_eq!(out.model.stats(), model.stats());
    }

    #[test]
    fn exact_iterates_stay_in_span(seed in any::<u64>(), adaptive in any::<bool>()) {
        let basis = SubspaceBasis::random(10, 3, seed).unwrap();
        let model = LinearScoreModel::subspace(basis.clone(), normal_vector(10, seed, 19)).unwrap();
        let obj = Objective::quad_scalar(&theta_with_ratio(&basis, 9.0, seed).unwrap(), 3.0, 10.0);
        let c = OptConfig {
            rounds: 10,
            lambda: 5.0,
            alg2: adaptive.then(Alg2Rules::default),
            ..OptConfig::default()
        };
        for m in exact_mean_recursion(&model, &obj, &c).unwrap() {
            prop_assert!(basis.orthogonal(&m).norm() < 1e-10);
        }
    }

    #[test]
    fn stronger_guidance_higher_reward(seed in any::<u64>()) {
        let basis = SubspaceBasis::random(10, 3, seed).unwrap();
        let model = LinearScoreModel::subspace(basis.clone(), DVector::zeros(10)).unwrap();
        let obj = Objective::quad_scalar(&theta_with_ratio(&basis, 9.0, seed).unwrap(), 3.0, 10.0);
        let run = |lambda: f64| {
            let c = OptConfig { rounds: 60, lambda, ..OptConfig::default() };
            let means = exact_mean_recursion(&model, &obj, &c).unwrap();
            obj.value(means.last().unwrap())
        };
        prop_assert!(run(3.0) >= run(6.0));
    }
}
