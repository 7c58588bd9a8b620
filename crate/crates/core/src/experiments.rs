//! Problem setups shared by the verification suite, the CLI and the tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{empirical_stats, generate_subspace, Dataset, GaussianDist, LatentDist, SubspaceBasis};
use crate::error::Result;
use crate::guidance::{BetaRule, GuidanceKind};
use crate::io::{fmt_f64, trajectory_table, CsvTable};
use crate::objective::{theta_with_ratio, Objective};
use crate::optimizer::{run_alg1, run_alg2, Alg2Rules, BatchSchedule, OptConfig};
use crate::sampler::SamplerConfig;
use crate::schedule::NoiseSchedule;
use crate::rng::{derive_seed, stream_rng};
use crate::score::{fit_subspace, LinearScoreModel};

pub const AMBIENT_DIM: usize = 64;
pub const LATENT_DIM: usize = 16;
pub const PRETRAIN_SAMPLES: usize = 65536;

/// Subspace data with its fitted score models.
#[derive(Debug, Clone)]
pub struct SubspaceProblem {
    pub basis: SubspaceBasis,
    pub data: Dataset,
    pub stats: GaussianDist,
    pub model: LinearScoreModel,
}

impl SubspaceProblem {
    pub fn generate(ambient: usize, latent: usize, n: usize, seed: u64) -> Result<Self> {
        let basis = SubspaceBasis::random(ambient, latent, derive_seed(seed, 0))?;
        let data = generate_subspace(&basis, &LatentDist::StdNormal, n, derive_seed(seed, 1))?;
        let stats = empirical_stats(&data);
        let model = fit_subspace(&data, None)?;
        Ok(Self {
            basis,
            data,
            stats,
            model,
        })
    }

    /// Fit a subspace score to existing data, recovering the basis when the
    /// dataset does not carry one.
    pub fn from_dataset(data: Dataset) -> Result<Self> {
        let model = fit_subspace(&data, None)?;
        let basis = model.basis().cloned().expect("subspace model has a basis");
        let stats = empirical_stats(&data);
        Ok(Self {
            basis,
            data,
            stats,
            model,
        })
    }

    /// Pretrained full-linear score with frozen covariance.
    pub fn frozen_model(&self) -> Result<LinearScoreModel> {
        LinearScoreModel::frozen_cov(self.stats.clone(), self.stats.mean.clone())
    }

    /// `f₁(x) = 10 − (θᵀx − 3)²` with the given off/on-support ratio of `θ`.
    pub fn f1(&self, ratio: f64, seed: u64) -> Result<Objective> {
        let theta = theta_with_ratio(&self.basis, ratio, seed)?;
        Ok(Objective::quad_scalar(&theta, 3.0, 10.0))
    }
}

/// `f₂(x) = 5 − 0.5‖x − b‖`.
pub fn f2(b: &DVector<f64>) -> Objective {
    Objective::dist_norm(b, 5.0, 0.5)
}

/// Random mean and a random-eigenbasis covariance with eigenvalues in `[0.1, 1]`.
pub fn random_gaussian(dim: usize, seed: u64) -> Result<GaussianDist> {
    random_gaussian_in(dim, 0.1, 1.0, seed)
}

/// Random mean and a covariance with eigenvalues drawn uniformly from `[lo, hi]`.
pub fn random_gaussian_in(dim: usize, lo: f64, hi: f64, seed: u64) -> Result<GaussianDist> {
    let mut rng = stream_rng(seed, 0);
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = crate::linalg::orthonormalize(&g)?;
    let eig = DVector::from_fn(dim, |_, _| lo + (hi - lo) * rng.gen::<f64>());
    let cov = crate::linalg::symmetrize(&(&q * DMatrix::from_diagonal(&eig) * q.transpose()));
    let mean = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    GaussianDist::new(mean, cov)
}

/// Standard-normal vector of length `dim` from stream `stream` of `seed`.
pub fn normal_vector(dim: usize, seed: u64, stream: u64) -> DVector<f64> {
    let mut rng = stream_rng(seed, stream);
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Settings shared by the figure generators.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FigureSettings {
    pub rounds: usize,
    /// Regularization strengths for the reward-vs-round panels.
    pub lambdas: Vec<f64>,
    /// Guidance strength `1/λ` for the loss-vs-naive comparison.
    pub comparison_lambda: f64,
    /// Off/on-support ratio of `θ` in the skewed objective.
    pub theta_ratio: f64,
    pub batch: usize,
    pub n_steps: usize,
    /// Rounds of adaptive fine-tuning.
    pub alg2_rounds: usize,
}

impl Default for FigureSettings {
    fn default() -> Self {
        Self {
            rounds: 20,
            lambdas: vec![4.0, 8.0, 16.0],
            comparison_lambda: 4.0,
            theta_ratio: 9.0,
            batch: 512,
            n_steps: 200,
            alg2_rounds: 50,
        }
    }
}

impl FigureSettings {
    fn opt_config(&self, lambda: f64, rounds: usize) -> OptConfig {
        OptConfig {
            rounds,
            lambda,
            batch: BatchSchedule::Constant { size: self.batch },
            sampler: SamplerConfig {
                n_steps: self.n_steps,
                ..SamplerConfig::default()
            },
            beta_rule: BetaRule::SubspaceTheory,
            ..OptConfig::default()
        }
    }
}

fn num(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Off-support ratio per round for loss and naive guidance on the skewed
/// objective. Columns: `k, ratio_loss, ratio_naive, value_loss, value_naive`.
pub fn figure_guidance_comparison(problem: &SubspaceProblem, fig: &FigureSettings, seed: u64) -> Result<CsvTable> {
    let obj = problem.f1(fig.theta_ratio, derive_seed(seed, 0))?;
    let schedule = NoiseSchedule::default();
    let base = fig.opt_config(fig.comparison_lambda, fig.rounds);
    let loss = run_alg1(&problem.model, &obj, &base, &schedule, derive_seed(seed, 1))?;
    let naive_cfg = OptConfig {
        guidance: GuidanceKind::Naive,
        ..base
    };
    let naive = run_alg1(&problem.model, &obj, &naive_cfg, &schedule, derive_seed(seed, 1))?;
    let mut t = CsvTable::new(["k", "ratio_loss", "ratio_naive", "value_loss", "value_naive"]);
    for (a, b) in loss.history.iter().zip(&naive.history) {
        t.push(vec![
            a.k.to_string(),
            num(a.off_support_ratio),
            num(b.off_support_ratio),
            fmt_f64(a.value),
            fmt_f64(b.value),
        ])?;
    }
    Ok(t)
}

/// Objective used by each reward-vs-round panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    /// `f₁` with `θ` inside the subspace.
    OnSupport,
    /// `f₁` with a skewed `θ`.
    Skewed,
    /// `f₂` with a homogeneous target `b`.
    Distance,
}

impl Panel {
    pub const ALL: [Panel; 3] = [Panel::OnSupport, Panel::Skewed, Panel::Distance];

    pub fn name(self) -> &'static str {
        match self {
            Panel::OnSupport => "on_support",
            Panel::Skewed => "skewed",
            Panel::Distance => "distance",
        }
    }

    pub fn objective(self, problem: &SubspaceProblem, fig: &FigureSettings, seed: u64) -> Result<Objective> {
        match self {
            Panel::OnSupport => problem.f1(0.0, seed),
            Panel::Skewed => problem.f1(fig.theta_ratio, seed),
            Panel::Distance => Ok(f2(&DVector::from_element(problem.basis.ambient_dim(), 1.0))),
        }
    }
}

/// Guidance-only reward per round for each `λ`.
/// Columns: `lambda, k, value, gap, off_support_ratio`.
pub fn figure_reward_panel(problem: &SubspaceProblem, panel: Panel, fig: &FigureSettings, seed: u64) -> Result<CsvTable> {
    let obj = panel.objective(problem, fig, derive_seed(seed, 0))?;
    let schedule = NoiseSchedule::default();
    let mut t = CsvTable::new(["lambda", "k", "value", "gap", "off_support_ratio"]);
    for (i, &lambda) in fig.lambdas.iter().enumerate() {
        let cfg = fig.opt_config(lambda, fig.rounds);
        let run = run_alg1(&problem.model, &obj, &cfg, &schedule, derive_seed(seed, 1 + i as u64))?;
        for r in &run.history {
            t.push(vec![
                fmt_f64(lambda),
                r.k.to_string(),
                fmt_f64(r.value),
                num(r.gap),
                num(r.off_support_ratio),
            ])?;
        }
    }
    Ok(t)
}

/// Adaptive fine-tuning trajectory on the skewed objective with the
/// default parameter rules.
pub fn figure_adaptive(problem: &SubspaceProblem, fig: &FigureSettings, seed: u64) -> Result<CsvTable> {
    let obj = problem.f1(fig.theta_ratio, derive_seed(seed, 0))?;
    let cfg = OptConfig {
        alg2: Some(Alg2Rules::default()),
        ..fig.opt_config(1.0, fig.alg2_rounds)
    };
    let run = run_alg2(&problem.model, &obj, &cfg, &NoiseSchedule::default(), derive_seed(seed, 1))?;
    Ok(trajectory_table(&run))
}
