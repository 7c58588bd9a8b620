use nalgebra::DVector;

use gradguide::dataset::batch_off_support_ratio;
use gradguide::experiments::{normal_vector, random_gaussian, SubspaceProblem};
use gradguide::guidance::{target_y, BetaRule, GuidanceSpec};
use gradguide::optimizer::{exact_mean_recursion, run_alg1, run_alg2, Alg2Rules, BatchSchedule, OptConfig};
use gradguide::sampler::{backward_sample, oracle_sample, oracle_target, SampleBatch, SamplerConfig, SamplerMode};
use gradguide::schedule::NoiseSchedule;
use gradguide::score::LinearScoreModel;

fn max_z(a: &SampleBatch, b: &SampleBatch) -> f64 {
    let sa = a.stats();
    let sb = b.stats();
    (0..sa.dim())
        .map(|i| {
            let se = (sa.cov[(i, i)] / a.len() as f64 + sb.cov[(i, i)] / b.len() as f64).sqrt();
            (sa.mean[i] - sb.mean[i]).abs() / se
        })
        .fold(0.0, f64::max)
}

fn gaussian_setup(seed: u64) -> (LinearScoreModel, GuidanceSpec) {
    let stats = random_gaussian(6, seed).unwrap();
    let model = LinearScoreModel::full_linear(stats.clone()).unwrap();
    let g = normal_vector(6, seed, 1);
    let y = g.dot(&stats.mean) + 1.5;
    (model, GuidanceSpec::loss(g, y, 0.8, BetaRule::GaussianTheory))
}

fn small_problem(seed: u64) -> SubspaceProblem {
    SubspaceProblem::generate(24, 6, 4096, seed).unwrap()
}

#[test]
fn sde_agrees_with_oracle() {
    let s = NoiseSchedule::default();
    for seed in [3, 4] {
        let (model, spec) = gaussian_setup(seed);
        let cfg = SamplerConfig {
            n_steps: 400,
            batch: 20000,
            seed: seed + 100,
            ..SamplerConfig::default()
        };
        let sde = backward_sample(&model, &spec, &cfg, &s).unwrap();
        let exact = oracle_sample(&oracle_target(&model, &spec).unwrap(), 20000, seed + 200).unwrap();
        let z = max_z(&sde, &exact);
        let cov = (sde.stats().cov - exact.stats().cov).norm();
        assert!(z < 4.5, "seed {seed}: max z {z}");
        assert!(cov < 0.1, "seed {seed}: covariance gap {cov}");
    }
}

#[test]
fn halving_the_step_is_within_sampling_error() {
    let s = NoiseSchedule::default();
    let (model, spec) = gaussian_setup(11);
    let run = |n_steps| {
        let cfg = SamplerConfig {
            n_steps,
            batch: 20000,
            seed: 5,
            ..SamplerConfig::default()
        };
        backward_sample(&model, &spec, &cfg, &s).unwrap()
    };
    let z = max_z(&run(200), &run(400));
    assert!(z < 4.5, "max z {z}");
}

#[test]
fn span_confinement_is_set_by_the_step_size() {
    let p = small_problem(8);
    let s = NoiseSchedule::default();
    let ratio = |horizon: f64, n_steps: usize| {
        let cfg = SamplerConfig {
            horizon,
            n_steps,
            batch: 2048,
            seed: 9,
            ..SamplerConfig::default()
        };
        let b = backward_sample(&p.model, &GuidanceSpec::none(24), &cfg, &s).unwrap();
        batch_off_support_ratio(&b.samples, &p.basis).unwrap()
    };
    let r5 = ratio(5.0, 200);
    let r10 = ratio(10.0, 400);
    let r10_coarse = ratio(10.0, 200);
    assert!(r5 < 1e-3 && r10 < 1e-3, "T=5 {r5}, T=10 {r10}");
    assert!((r5 - r10).abs() < 0.02 * r5, "equal step size: T=5 {r5}, T=10 {r10}");
    assert!(r10 < r10_coarse, "400 steps {r10}, 200 steps {r10_coarse}");
}

#[test]
fn sampling_does_not_depend_on_thread_count() {
    let s = NoiseSchedule::default();
    let (model, spec) = gaussian_setup(21);
    let cfg = SamplerConfig {
        batch: 1000,
        seed: 77,
        ..SamplerConfig::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| backward_sample(&model, &spec, &cfg, &s).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one.samples, three.samples);
}

#[test]
fn oracle_samples_stay_on_the_span() {
    let p = small_problem(31);
    let g = normal_vector(24, 31, 2);
    let y = target_y(&p.model, &g, 1.0, 1.0).unwrap();
    let spec = GuidanceSpec::loss(g, y, 1.0, BetaRule::SubspaceTheory);
    let b = oracle_sample(&oracle_target(&p.model, &spec).unwrap(), 4096, 1).unwrap();
    assert!(batch_off_support_ratio(&b.samples, &p.basis).unwrap() < 1e-10);
}

#[test]
fn optimizer_iterates_stay_on_the_span() {
    let p = small_problem(41);
    let f1 = p.f1(9.0, 41).unwrap();
    let s = NoiseSchedule::default();
    let oracle = OptConfig {
        rounds: 5,
        lambda: 4.0,
        batch: BatchSchedule::Constant { size: 1024 },
        sampler: SamplerConfig {
            mode: SamplerMode::AnalyticOracle,
            ..SamplerConfig::default()
        },
        ..OptConfig::default()
    };
    let sde = OptConfig {
        sampler: SamplerConfig::default(),
        ..oracle.clone()
    };
    for state in [
        run_alg1(&p.model, &f1, &oracle, &s, 1).unwrap(),
        run_alg2(&p.frozen_model().unwrap(), &f1, &OptConfig { alg2: Some(Alg2Rules::default()), ..oracle.clone() }, &s, 2).unwrap(),
    ] {
        for r in &state.history {
            assert!(r.off_support_ratio.unwrap() < 1e-10, "round {}: {:?}", r.k, r.off_support_ratio);
        }
    }
    let state = run_alg1(&p.model, &f1, &sde, &s, 3).unwrap();
    for r in &state.history {
        assert!(r.off_support_ratio.unwrap() < 0.05, "round {}: {:?}", r.k, r.off_support_ratio);
    }
}

#[test]
fn larger_initial_batches_track_the_exact_recursion_more_closely() {
    let p = small_problem(51);
    let model = p.frozen_model().unwrap();
    let f1 = p.f1(9.0, 51).unwrap();
    let s = NoiseSchedule::default();
    let cfg = |initial| OptConfig {
        rounds: 4,
        batch: BatchSchedule::Geometric {
            initial,
            ratio: 4.0,
            cap: 65536,
        },
        sampler: SamplerConfig {
            mode: SamplerMode::AnalyticOracle,
            ..SamplerConfig::default()
        },
        alg2: Some(Alg2Rules::default()),
        ..OptConfig::default()
    };
    let exact: DVector<f64> = exact_mean_recursion(&model, &f1, &cfg(64)).unwrap().pop().unwrap();
    let mean_error = |initial| {
        (0..6u64)
            .map(|seed| {
                let state = run_alg2(&model, &f1, &cfg(initial), &s, seed).unwrap();
                (&state.final_record().zbar - &exact).norm()
            })
            .sum::<f64>()
            / 6.0
    };
    let (small, large) = (mean_error(64), mean_error(256));
    assert!(large < small, "B0=64: {small}, B0=256: {large}");
}
