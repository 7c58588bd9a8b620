//! Guidance-only optimization (Algorithm 1) and guidance with adaptive bias
//! fine-tuning (Algorithm 2).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_off_support_ratio, off_support_ratio, SubspaceBasis};
use crate::error::{Error, Result};
use crate::guidance::{target_y, BetaRule, GuidanceKind, GuidanceSpec};
use crate::objective::{regularized_opt, span_opt, Objective};
use crate::rng::derive_seed;
use crate::sampler::{backward_sample, oracle_target, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::score::{LinearScoreModel, ScoreClass};

/// Upper bound on any single round's batch.
pub const MAX_BATCH: usize = 65536;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchSchedule {
    Constant { size: usize },
    /// `B_k = min(initial · ratio^k, cap)`.
    Geometric {
        initial: usize,
        ratio: f64,
        #[serde(default = "default_cap")]
        cap: usize,
    },
}

fn default_cap() -> usize {
    MAX_BATCH
}

impl BatchSchedule {
    pub fn size(&self, k: usize) -> usize {
        match *self {
            BatchSchedule::Constant { size } => size,
            BatchSchedule::Geometric {
                initial,
                ratio,
                cap,
            } => {
                let b = initial as f64 * ratio.powi(k.min(i32::MAX as usize) as i32);
                if b >= cap as f64 {
                    cap
                } else {
                    b.round().max(1.0) as usize
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            BatchSchedule::Constant { size } => size >= 1,
            BatchSchedule::Geometric {
                initial,
                ratio,
                cap,
            } => initial >= 1 && ratio >= 1.0 && ratio.is_finite() && cap >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("optimizer.batch", "batch sizes must be at least 1"))
        }
    }
}

impl Default for BatchSchedule {
    fn default() -> Self {
        BatchSchedule::Constant { size: 512 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum EtaRule {
    /// `η = 2/(L + 2λ)`.
    TwoOverLplus2Lambda,
    Explicit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum LambdaRule {
    /// `λ = L ln K / (4K)`.
    LLogKover4K,
    Explicit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alg2Rules {
    pub eta_rule: EtaRule,
    pub lambda_rule: LambdaRule,
}

impl Default for Alg2Rules {
    fn default() -> Self {
        Self {
            eta_rule: EtaRule::TwoOverLplus2Lambda,
            lambda_rule: LambdaRule::LLogKover4K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    /// Number of guidance updates `K`; rounds `0..=K` are sampled.
    pub rounds: usize,
    /// Regularization strength; Algorithm 1 uses `η = 1/λ`.
    pub lambda: f64,
    pub batch: BatchSchedule,
    pub sigma: f64,
    pub beta_rule: BetaRule,
    /// Guidance term built from each round's gradient.
    pub guidance: GuidanceKind,
    /// Replace sampling by the analytic posterior mean.
    pub exact_mean: bool,
    /// Integrator settings; `batch` and `seed` are set per round.
    pub sampler: SamplerConfig,
    pub alg2: Option<Alg2Rules>,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            lambda: 1.0,
            batch: BatchSchedule::default(),
            sigma: 1.0,
            beta_rule: BetaRule::GaussianTheory,
            guidance: GuidanceKind::Loss,
            exact_mean: false,
            sampler: SamplerConfig::default(),
            alg2: None,
        }
    }
}

impl OptConfig {
    fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("optimizer.rounds", "must be at least 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("optimizer.sigma", "must be positive"));
        }
        self.batch.validate()
    }
}

/// Step parameters after applying the configured rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub lambda: f64,
    pub eta: f64,
    /// Weight of the newest batch in the bias refit (`1 − ηλ`); 0 for Algorithm 1.
    pub w: f64,
    /// `Σ`-adapted smoothness of the objective, when defined.
    pub smoothness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub k: usize,
    pub batch_size: usize,
    /// Sample mean `z̄_k` (the posterior mean in exact-mean mode).
    pub zbar: DVector<f64>,
    /// `g_k = ∇f(z̄_k)`.
    pub grad: DVector<f64>,
    /// Target `y_k` of the guidance built from this round.
    pub y: f64,
    pub value: f64,
    pub gap: Option<f64>,
    /// Mean per-sample off-support ratio (ratio of `z̄_k` in exact-mean mode).
    pub off_support_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptRunState {
    /// Number of completed guidance updates.
    pub round: usize,
    /// Score model that generated the last round.
    pub model: LinearScoreModel,
    pub history: Vec<RoundRecord>,
    pub params: StepParams,
    /// Reference optimum: `x*_λ` for Algorithm 1, the span maximizer for Algorithm 2.
    pub x_star: Option<DVector<f64>>,
    pub f_star: Option<f64>,
}

impl OptRunState {
    pub fn final_record(&self) -> &RoundRecord {
        self.history.last().expect("at least one round")
    }

    pub fn means(&self) -> Vec<DVector<f64>> {
        self.history.iter().map(|r| r.zbar.clone()).collect()
    }
}

/// `Σ wᵢ mᵢ / Σ wᵢ`, the bias mean of a weighted multi-dataset refit.
pub fn mixture_mean(parts: &[(&DVector<f64>, f64)]) -> Result<DVector<f64>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("weights", "need at least one component"))?;
    let mut acc = DVector::zeros(first.0.len());
    let mut total = 0.0;
    for (m, w) in parts {
        if !(*w >= 0.0 && w.is_finite()) {
            return Err(Error::config("weights", "must be finite and nonnegative"));
        }
        Error::check_dim(acc.len(), m.len(), "component mean")?;
        acc.axpy(*w, m, 1.0);
        total += w;
    }
    if !(total > 0.0) {
        return Err(Error::config("weights", "must not all vanish"));
    }
    Ok(acc / total)
}

pub fn alg2_params(model: &LinearScoreModel, obj: &Objective, cfg: &OptConfig) -> Result<StepParams> {
    let rules = cfg.alg2.unwrap_or_default();
    let smoothness = obj.smoothness_adapted(&model.implied_cov());
    let need_l = || {
        smoothness.ok_or_else(|| {
            Error::config("optimizer.alg2", "rule needs a smooth objective (L undefined)")
        })
    };
    let lambda = match rules.lambda_rule {
        LambdaRule::Explicit(l) => l,
        LambdaRule::LLogKover4K => {
            let k = cfg.rounds as f64;
            need_l()? * k.ln() / (4.0 * k)
        }
    };
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::config("optimizer.lambda", format!("resolved λ = {lambda} must be positive")));
    }
    let eta = match rules.eta_rule {
        EtaRule::Explicit(e) => e,
        EtaRule::TwoOverLplus2Lambda => 2.0 / (need_l()? + 2.0 * lambda),
    };
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::config("optimizer.eta", format!("resolved η = {eta} must be positive")));
    }
    let w = 1.0 - eta * lambda;
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::config(
            "optimizer.alg2",
            format!("refit weight w = 1 − ηλ = {w} must lie in (0, 1)"),
        ));
    }
    Ok(StepParams {
        lambda,
        eta,
        w,
        smoothness,
    })
}

fn alg1_params(model: &LinearScoreModel, obj: &Objective, cfg: &OptConfig) -> Result<StepParams> {
    if !(cfg.lambda > 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::config("optimizer.lambda", "must be positive"));
    }
    let smoothness = obj.smoothness_adapted(&model.implied_cov());
    if let Some(l) = smoothness {
        if cfg.lambda <= l {
            log::warn!("λ = {} does not exceed the objective smoothness L = {l}", cfg.lambda);
        }
    }
    Ok(StepParams {
        lambda: cfg.lambda,
        eta: 1.0 / cfg.lambda,
        w: 0.0,
        smoothness,
    })
}

struct Draw {
    zbar: DVector<f64>,
    ratio: Option<f64>,
}

fn draw(
    model: &LinearScoreModel,
    spec: &GuidanceSpec,
    cfg: &OptConfig,
    schedule: &NoiseSchedule,
    batch: usize,
    seed: u64,
    basis: Option<&SubspaceBasis>,
) -> Result<Draw> {
    if cfg.exact_mean {
        let zbar = oracle_target(model, spec)?.mean;
        let ratio = match basis {
            Some(b) if zbar.iter().any(|&v| v != 0.0) => Some(off_support_ratio(&zbar, b)?),
            _ => None,
        };
        return Ok(Draw { zbar, ratio });
    }
    let scfg = SamplerConfig {
        batch,
        seed,
        ..cfg.sampler.clone()
    };
    let out = backward_sample(model, spec, &scfg, schedule)?;
    let ratio = match basis {
        Some(b) => batch_off_support_ratio(&out.samples, b).ok(),
        None => None,
    };
    Ok(Draw {
        zbar: out.mean(),
        ratio,
    })
}

fn run(
    initial: &LinearScoreModel,
    obj: &Objective,
    cfg: &OptConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    adaptive: bool,
) -> Result<OptRunState> {
    cfg.validate()?;
    let dim = initial.dim();
    obj.validate(dim)?;
    let params = if adaptive {
        if !matches!(initial.class(), ScoreClass::FrozenCov | ScoreClass::Subspace) {
            return Err(Error::Unsupported(format!(
                "adaptive fine-tuning needs a frozen_cov or subspace model, got {}",
                initial.class().name()
            )));
        }
        alg2_params(initial, obj, cfg)?
    } else {
        alg1_params(initial, obj, cfg)?
    };

    let basis = initial.support_basis();
    let pretrained = initial.implied_gaussian();
    let (x_star, f_star) = if adaptive {
        match &basis {
            Some(b) => match span_opt(obj, b) {
                Ok((x, f)) => (Some(x), Some(f)),
                Err(_) => (None, None),
            },
            None => (None, obj.sup()),
        }
    } else {
        match regularized_opt(obj, &pretrained, params.lambda, basis.as_ref()) {
            Ok(x) => {
                let f = obj.value(&x);
                (Some(x), Some(f))
            }
            Err(_) => (None, None),
        }
    };

    let mut model = initial.clone();
    let mut spec = GuidanceSpec::none(dim);
    spec.sigma = cfg.sigma;
    spec.beta_rule = cfg.beta_rule;
    let mut history = Vec::with_capacity(cfg.rounds + 1);

    for k in 0..=cfg.rounds {
        let wrap = |e: Error| Error::Round {
            round: k,
            source: Box::new(e),
        };
        let batch = cfg.batch.size(k);
        let d = draw(&model, &spec, cfg, schedule, batch, derive_seed(seed, k as u64), basis.as_ref())
            .map_err(wrap)?;
        let grad = obj.grad(&d.zbar).map_err(wrap)?;
        let next = if adaptive {
            let mixed = &pretrained.mean * (1.0 - params.w) + &d.zbar * params.w;
            model.refit_bias_frozen(&mixed).map_err(wrap)?
        } else {
            model.clone()
        };
        let y = target_y(&next, &grad, cfg.sigma, params.eta).map_err(wrap)?;
        let value = obj.value(&d.zbar);
        history.push(RoundRecord {
            k,
            batch_size: if cfg.exact_mean { 0 } else { batch },
            zbar: d.zbar,
            grad: grad.clone(),
            y,
            value,
            gap: f_star.map(|f| f - value),
            off_support_ratio: d.ratio,
        });
        if k < cfg.rounds {
            model = next;
            spec = match cfg.guidance {
                GuidanceKind::Loss => GuidanceSpec::loss(grad, y, cfg.sigma, cfg.beta_rule),
                GuidanceKind::Naive => GuidanceSpec::naive(grad, y, cfg.sigma, cfg.beta_rule),
                GuidanceKind::None => GuidanceSpec {
                    sigma: cfg.sigma,
                    beta_rule: cfg.beta_rule,
                    ..GuidanceSpec::none(dim)
                },
            };
        }
    }

    Ok(OptRunState {
        round: cfg.rounds,
        model,
        history,
        params,
        x_star,
        f_star,
    })
}

/// Algorithm 1: the score model is never modified.
pub fn run_alg1(
    model: &LinearScoreModel,
    obj: &Objective,
    cfg: &OptConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<OptRunState> {
    run(model, obj, cfg, schedule, seed, false)
}

/// Algorithm 2: the bias mean is refit to `(1 − w)μ̄ + w z̄_k` every round.
pub fn run_alg2(
    model: &LinearScoreModel,
    obj: &Objective,
    cfg: &OptConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<OptRunState> {
    run(model, obj, cfg, schedule, seed, true)
}

/// Mean iterates `μ_0, …, μ_K` without sampling noise; Algorithm 2 when
/// `cfg.alg2` is set, Algorithm 1 otherwise.
pub fn exact_mean_recursion(
    model: &LinearScoreModel,
    obj: &Objective,
    cfg: &OptConfig,
) -> Result<Vec<DVector<f64>>> {
    let exact = OptConfig {
        exact_mean: true,
        ..cfg.clone()
    };
    let schedule = NoiseSchedule::default();
    let state = run(model, obj, &exact, &schedule, 0, cfg.alg2.is_some())?;
    Ok(state.means())
}
