//! Guided backward SDE sampler and the analytic-posterior oracle.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_stats, standard_normal_columns, GaussianDist};
use crate::error::{Error, Result};
use crate::guidance::{guided_score, BetaRule, GuidanceKind, GuidanceSpec};
use crate::linalg::{symmetrize, CovSpectrum};
use crate::quadrature::adaptive_simpson;
use crate::rng::stream_rng;
use crate::schedule::{h_sqrt_schedule, NoiseSchedule};
use crate::score::{LinearScoreModel, ScoreClass};

/// Trajectories are advanced in fixed-size column blocks; the block layout
/// does not depend on the number of worker threads.
const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Sde,
    AnalyticOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub horizon: f64,
    pub n_steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub mode: SamplerMode,
    /// Skip the Brownian increment on the last step (the score is still
    /// evaluated at `t = T/n_steps`).
    pub denoise_final: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            n_steps: 200,
            batch: 512,
            seed: 0,
            mode: SamplerMode::Sde,
            denoise_final: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("sampler.n_steps", "must be at least 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("sampler.horizon", "must be positive"));
        }
        if self.horizon > schedule.horizon() {
            return Err(Error::config(
                "sampler.horizon",
                format!("exceeds the schedule horizon {}", schedule.horizon()),
            ));
        }
        if self.batch == 0 {
            return Err(Error::config("sampler.batch", "must be at least 1"));
        }
        Ok(())
    }

    /// Forward time at which step `i` evaluates the score: `T − i·T/n`.
    pub fn step_time(&self, i: usize) -> f64 {
        self.horizon * (self.n_steps - i) as f64 / self.n_steps as f64
    }
}

/// Samples as the columns of a `D×batch` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub samples: DMatrix<f64>,
    pub config: SamplerConfig,
    /// RNG stream consumed by each column.
    pub stream_ids: Vec<u64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn mean(&self) -> DVector<f64> {
        crate::dataset::column_mean(&self.samples)
    }

    pub fn stats(&self) -> GaussianDist {
        sample_stats(&self.samples)
    }
}

/// `guided_score(x, t) = M x + m`, recovered by probing at `0` and `e_j`.
pub fn affine_guided_score(
    model: &LinearScoreModel,
    spec: &GuidanceSpec,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = model.dim();
    let zero = DVector::zeros(n);
    let m = guided_score(spec, model, &zero, t, schedule)?;
    let mut big_m = DMatrix::zeros(n, n);
    let mut e = DVector::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        let col = guided_score(spec, model, &e, t, schedule)? - &m;
        big_m.set_column(j, &col);
        e[j] = 0.0;
    }
    Ok((big_m, m))
}

struct StepMap {
    transition: DMatrix<f64>,
    offset: DVector<f64>,
    noise: f64,
}

fn step_maps(
    model: &LinearScoreModel,
    spec: &GuidanceSpec,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<StepMap>> {
    let n = model.dim();
    let dt = cfg.horizon / cfg.n_steps as f64;
    (0..cfg.n_steps)
        .map(|i| {
            let wrap = |e: Error| Error::Step {
                step: i,
                source: Box::new(e),
            };
            let tau = cfg.step_time(i);
            let q = schedule.rate(tau).map_err(wrap)?;
            let (big_m, m) = affine_guided_score(model, spec, tau, schedule).map_err(wrap)?;
            // x ← x + q dt (x/2 + M x + m) + √(q dt) z
            let mut transition = big_m * (q * dt);
            for k in 0..n {
                transition[(k, k)] += 1.0 + 0.5 * q * dt;
            }
            let last = i + 1 == cfg.n_steps;
            let noise = if last && cfg.denoise_final {
                0.0
            } else {
                (q * dt).sqrt()
            };
            Ok(StepMap {
                transition,
                offset: m * (q * dt),
                noise,
            })
        })
        .collect()
}

/// Euler–Maruyama simulation of the guided backward process from `N(0, I)`.
pub fn backward_sample(
    model: &LinearScoreModel,
    spec: &GuidanceSpec,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<SampleBatch> {
    cfg.validate(schedule)?;
    spec.validate(model.dim())?;
    match cfg.mode {
        SamplerMode::Sde => sde_sample(model, spec, cfg, schedule),
        SamplerMode::AnalyticOracle => {
            let target = oracle_target(model, spec)?;
            let mut batch = oracle_sample(&target, cfg.batch, cfg.seed)?;
            batch.config = cfg.clone();
            Ok(batch)
        }
    }
}

fn sde_sample(
    model: &LinearScoreModel,
    spec: &GuidanceSpec,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<SampleBatch> {
    let n = model.dim();
    let maps = step_maps(model, spec, cfg, schedule)?;
    let starts: Vec<usize> = (0..cfg.batch).step_by(CHUNK).collect();
    let blocks: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&start| {
            let width = CHUNK.min(cfg.batch - start);
            let mut rngs: Vec<_> = (0..width)
                .map(|j| stream_rng(cfg.seed, (start + j) as u64))
                .collect();
            let mut x = DMatrix::from_fn(n, width, |_, _| 0.0);
            for (j, rng) in rngs.iter_mut().enumerate() {
                for k in 0..n {
                    x[(k, j)] = rng.sample(StandardNormal);
                }
            }
            let mut next = DMatrix::zeros(n, width);
            for map in &maps {
                next.gemm(1.0, &map.transition, &x, 0.0);
                for (j, rng) in rngs.iter_mut().enumerate() {
                    let mut col = next.column_mut(j);
                    col += &map.offset;
                    if map.noise > 0.0 {
                        for v in col.iter_mut() {
                            let z: f64 = rng.sample(StandardNormal);
                            *v += map.noise * z;
                        }
                    }
                }
                std::mem::swap(&mut x, &mut next);
            }
            x
        })
        .collect();
    let mut samples = DMatrix::zeros(n, cfg.batch);
    for (block, &start) in blocks.iter().zip(&starts) {
        samples.columns_mut(start, block.ncols()).copy_from(block);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("sampler produced non-finite values"));
    }
    Ok(SampleBatch {
        samples,
        config: cfg.clone(),
        stream_ids: (0..cfg.batch as u64).collect(),
    })
}

/// Exact limit distribution of the guided backward process for the guidance
/// kinds where it is known in closed form.
pub fn oracle_target(model: &LinearScoreModel, spec: &GuidanceSpec) -> Result<GaussianDist> {
    if spec.score_scale != 1.0 {
        return Err(Error::Unsupported("the oracle requires an unscaled score".into()));
    }
    let implied = model.implied_gaussian();
    match (spec.kind, spec.beta_rule) {
        (GuidanceKind::None, _) => Ok(implied),
        (GuidanceKind::Loss, BetaRule::GaussianTheory) => {
            analytic_posterior(&implied, &spec.g, spec.y, spec.sigma)
        }
        (GuidanceKind::Loss, BetaRule::SubspaceTheory) if model.class() == ScoreClass::Subspace => {
            analytic_posterior(&implied, &spec.g, spec.y, spec.sigma)
        }
        _ => Err(Error::Unsupported(
            "the oracle covers unguided sampling and loss guidance with a theory β".into(),
        )),
    }
}

/// `x₀ | y` for `x₀ ~ N(μ, Σ)`, `y = gᵀx₀ + N(0, σ²)`.
pub fn analytic_posterior(
    stats: &GaussianDist,
    g: &DVector<f64>,
    y: f64,
    sigma: f64,
) -> Result<GaussianDist> {
    if !(sigma > 0.0) {
        return Err(Error::config("sigma", "must be positive"));
    }
    Error::check_dim(stats.dim(), g.len(), "gradient")?;
    let sg = &stats.cov * g;
    let den = sigma * sigma + g.dot(&sg);
    let mean = &stats.mean + &sg * ((y - g.dot(&stats.mean)) / den);
    let cov = symmetrize(&(&stats.cov - &sg * sg.transpose() / den));
    Ok(GaussianDist { mean, cov })
}

/// Exact draws `mean + Q diag(√λ) z`, one RNG stream per sample.
pub fn oracle_sample(dist: &GaussianDist, batch: usize, seed: u64) -> Result<SampleBatch> {
    if batch == 0 {
        return Err(Error::config("batch", "must be at least 1"));
    }
    let factor = CovSpectrum::new(&dist.cov)?.sqrt_factor();
    let z = standard_normal_columns(factor.ncols(), batch, seed);
    let mut samples = &factor * z;
    for mut col in samples.column_iter_mut() {
        col += &dist.mean;
    }
    Ok(SampleBatch {
        samples,
        config: SamplerConfig {
            batch,
            seed,
            mode: SamplerMode::AnalyticOracle,
            ..SamplerConfig::default()
        },
        stream_ids: (0..batch as u64).collect(),
    })
}

fn integrated_inverse_h(v: f64, tol: f64) -> Result<f64> {
    // ∫₀^{v²} ds / h(s) with s = u².
    let f = |u: f64| if u == 0.0 { 2.0 } else { 2.0 * u / h_sqrt_schedule(u * u) };
    adaptive_simpson(&f, 0.0, v, tol)
}

/// Coefficient `C` of `g` in the expected off-support component produced by
/// naive guidance with constant strength `b0` under `h(t) = 1 − exp(−√t)`:
/// `C = b0 ∫₀ᵀ exp(−∫₀ᵗ h⁻¹(s) ds) e^{t/2} dt`.
pub fn naive_offsupport_expectation(b0: f64, horizon: f64) -> Result<f64> {
    naive_offsupport_expectation_tol(b0, horizon, 1e-12)
}

/// As [`naive_offsupport_expectation`] with an explicit quadrature tolerance.
pub fn naive_offsupport_expectation_tol(b0: f64, horizon: f64, tol: f64) -> Result<f64> {
    if !(horizon >= 1.0) {
        return Err(Error::domain("the naive-guidance bound needs T >= 1"));
    }
    if b0 == 0.0 {
        return Ok(0.0);
    }
    // t = v², dt = 2v dv keeps the integrand smooth at the origin.
    let inner_tol = tol * 1e-2;
    let outer = |v: f64| match integrated_inverse_h(v, inner_tol) {
        Ok(big_h) => (-big_h + 0.5 * v * v).exp() * 2.0 * v,
        Err(_) => f64::NAN,
    };
    Ok(b0 * adaptive_simpson(&outer, 0.0, horizon.sqrt(), tol)?)
}
