//! Closed-form linear score models `s(x, t) = C_t x + b_t`.
//!
//! Every class is the exact score of a Gaussian `N(μ, Σ)` pushed through the
//! forward process, `s = −(α²Σ + hI)⁻¹(x − αμ)`:
//!
//! | class        | μ        | Σ        |
//! |--------------|----------|----------|
//! | `MeanOnly`   | x̄        | I        |
//! | `FullLinear` | μ̄        | Σ̄        |
//! | `Subspace`   | AAᵀx̄ʷ    | AAᵀ      |
//! | `FrozenCov`  | x̄ʷ       | Σ̄ (pretraining) |
//!
//! so evaluation, Tweedie estimates and guidance all reduce to spectral
//! functions of Σ.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{
    empirical_stats, latent_rank, recover_basis, weighted_mean, Dataset, GaussianDist,
    SubspaceBasis,
};
use crate::error::{Error, Result};
use crate::linalg::CovSpectrum;
use crate::schedule::NoiseSchedule;

/// Below this `α(t)` the Tweedie estimate is numerically meaningless.
pub const MIN_ALPHA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreClass {
    MeanOnly,
    FullLinear,
    Subspace,
    FrozenCov,
}

impl ScoreClass {
    pub fn name(self) -> &'static str {
        match self {
            ScoreClass::MeanOnly => "mean_only",
            ScoreClass::FullLinear => "full_linear",
            ScoreClass::Subspace => "subspace",
            ScoreClass::FrozenCov => "frozen_cov",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mean_only" => ScoreClass::MeanOnly,
            "full_linear" => ScoreClass::FullLinear,
            "subspace" => ScoreClass::Subspace,
            "frozen_cov" => ScoreClass::FrozenCov,
            other => {
                return Err(Error::Parse {
                    what: "score class".into(),
                    reason: format!("unknown class {other:?}"),
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    MeanOnly {
        xbar: DVector<f64>,
    },
    FullLinear {
        stats: GaussianDist,
        spectrum: CovSpectrum,
    },
    Subspace {
        basis: SubspaceBasis,
        xbar: DVector<f64>,
        xbar_proj: DVector<f64>,
    },
    FrozenCov {
        stats: GaussianDist,
        spectrum: CovSpectrum,
        xbar_w: DVector<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearScoreModel {
    repr: Repr,
}

/// Split of a subspace score into its `Span(A)` and orthogonal parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDecomposition {
    pub on_support: DVector<f64>,
    pub orthogonal: DVector<f64>,
}

impl LinearScoreModel {
    pub fn mean_only(xbar: DVector<f64>) -> Self {
        Self {
            repr: Repr::MeanOnly { xbar },
        }
    }

    pub fn full_linear(stats: GaussianDist) -> Result<Self> {
        let spectrum = CovSpectrum::new(&stats.cov)?;
        Ok(Self {
            repr: Repr::FullLinear { stats, spectrum },
        })
    }

    pub fn subspace(basis: SubspaceBasis, xbar: DVector<f64>) -> Result<Self> {
        Error::check_dim(basis.ambient_dim(), xbar.len(), "subspace mean")?;
        let xbar_proj = basis.project(&xbar);
        Ok(Self {
            repr: Repr::Subspace {
                basis,
                xbar,
                xbar_proj,
            },
        })
    }

    pub fn frozen_cov(stats: GaussianDist, xbar_w: DVector<f64>) -> Result<Self> {
        Error::check_dim(stats.dim(), xbar_w.len(), "weighted mean")?;
        let spectrum = CovSpectrum::new(&stats.cov)?;
        Ok(Self {
            repr: Repr::FrozenCov {
                stats,
                spectrum,
                xbar_w,
            },
        })
    }

    /// Keep the covariance of a `FullLinear` model fixed and expose only the bias.
    pub fn freeze(&self) -> Result<Self> {
        match &self.repr {
            Repr::FullLinear { stats, spectrum } => Ok(Self {
                repr: Repr::FrozenCov {
                    stats: stats.clone(),
                    spectrum: spectrum.clone(),
                    xbar_w: stats.mean.clone(),
                },
            }),
            Repr::FrozenCov { .. } | Repr::Subspace { .. } => Ok(self.clone()),
            Repr::MeanOnly { .. } => Err(Error::Unsupported(
                "a mean-only model has no covariance to freeze".into(),
            )),
        }
    }

    pub fn class(&self) -> ScoreClass {
        match self.repr {
            Repr::MeanOnly { .. } => ScoreClass::MeanOnly,
            Repr::FullLinear { .. } => ScoreClass::FullLinear,
            Repr::Subspace { .. } => ScoreClass::Subspace,
            Repr::FrozenCov { .. } => ScoreClass::FrozenCov,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            Repr::MeanOnly { xbar } => xbar.len(),
            Repr::FullLinear { stats, .. } => stats.dim(),
            Repr::Subspace { basis, .. } => basis.ambient_dim(),
            Repr::FrozenCov { stats, .. } => stats.dim(),
        }
    }

    /// The stored mean parameter (x̄, μ̄, unprojected x̄ʷ, x̄ʷ).
    pub fn mean_param(&self) -> &DVector<f64> {
        match &self.repr {
            Repr::MeanOnly { xbar } => xbar,
            Repr::FullLinear { stats, .. } => &stats.mean,
            Repr::Subspace { xbar, .. } => xbar,
            Repr::FrozenCov { xbar_w, .. } => xbar_w,
        }
    }

    /// Pretraining statistics for the covariance-carrying classes.
    pub fn stats(&self) -> Option<&GaussianDist> {
        match &self.repr {
            Repr::FullLinear { stats, .. } | Repr::FrozenCov { stats, .. } => Some(stats),
            _ => None,
        }
    }

    pub fn basis(&self) -> Option<&SubspaceBasis> {
        match &self.repr {
            Repr::Subspace { basis, .. } => Some(basis),
            _ => None,
        }
    }

    /// Mean `μ` of the Gaussian whose score this model is.
    pub fn implied_mean(&self) -> DVector<f64> {
        match &self.repr {
            Repr::MeanOnly { xbar } => xbar.clone(),
            Repr::FullLinear { stats, .. } => stats.mean.clone(),
            Repr::Subspace { xbar_proj, .. } => xbar_proj.clone(),
            Repr::FrozenCov { xbar_w, .. } => xbar_w.clone(),
        }
    }

    /// Covariance `Σ` of the Gaussian whose score this model is.
    pub fn implied_cov(&self) -> DMatrix<f64> {
        match &self.repr {
            Repr::MeanOnly { xbar } => DMatrix::identity(xbar.len(), xbar.len()),
            Repr::FullLinear { stats, .. } | Repr::FrozenCov { stats, .. } => stats.cov.clone(),
            Repr::Subspace { basis, .. } => basis.projector(),
        }
    }

    pub fn implied_gaussian(&self) -> GaussianDist {
        GaussianDist {
            mean: self.implied_mean(),
            cov: self.implied_cov(),
        }
    }

    /// Basis of the support of `Σ` when it is a proper subspace.
    pub fn support_basis(&self) -> Option<SubspaceBasis> {
        match &self.repr {
            Repr::MeanOnly { .. } => None,
            Repr::Subspace { basis, .. } => Some(basis.clone()),
            Repr::FullLinear { spectrum, .. } | Repr::FrozenCov { spectrum, .. } => {
                let r = spectrum.rank();
                if r == 0 || r == spectrum.dim() {
                    None
                } else {
                    SubspaceBasis::new(spectrum.range_basis()).ok()
                }
            }
        }
    }

    /// Whether `Σ` is singular.
    fn is_degenerate(&self) -> bool {
        match &self.repr {
            Repr::MeanOnly { .. } => false,
            Repr::Subspace { basis, .. } => basis.latent_dim() < basis.ambient_dim(),
            Repr::FullLinear { spectrum, .. } | Repr::FrozenCov { spectrum, .. } => {
                spectrum.rank() < spectrum.dim()
            }
        }
    }

    /// `f(Σ) v` for a spectral function `f`.
    pub fn cov_apply<F: Fn(f64) -> f64>(&self, v: &DVector<f64>, f: F) -> DVector<f64> {
        match &self.repr {
            Repr::MeanOnly { .. } => v * f(1.0),
            Repr::Subspace { basis, .. } => {
                let p = basis.project(v);
                let off = v - &p;
                p * f(1.0) + off * f(0.0)
            }
            Repr::FullLinear { spectrum, .. } | Repr::FrozenCov { spectrum, .. } => {
                spectrum.apply(v, f)
            }
        }
    }

    /// `f(Σ)` as a dense matrix.
    pub fn cov_matrix<F: Fn(f64) -> f64>(&self, f: F) -> DMatrix<f64> {
        let n = self.dim();
        match &self.repr {
            Repr::MeanOnly { .. } => DMatrix::identity(n, n) * f(1.0),
            Repr::Subspace { basis, .. } => {
                let p = basis.projector();
                let q = DMatrix::identity(n, n) - &p;
                p * f(1.0) + q * f(0.0)
            }
            Repr::FullLinear { spectrum, .. } | Repr::FrozenCov { spectrum, .. } => {
                spectrum.matrix(f)
            }
        }
    }

    fn coefficients(&self, t: f64, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
        let (alpha, h) = schedule.alpha_h(t)?;
        if h == 0.0 && self.is_degenerate() {
            return Err(Error::domain(format!(
                "{} score with singular covariance is undefined at t = 0; use t > 0",
                self.class().name()
            )));
        }
        Ok((alpha, h))
    }

    /// `s(x, t)`.
    pub fn evaluate(&self, x: &DVector<f64>, t: f64, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
        Error::check_dim(self.dim(), x.len(), "score input")?;
        let (alpha, h) = self.coefficients(t, schedule)?;
        Ok(match &self.repr {
            Repr::MeanOnly { xbar } => xbar * alpha - x,
            Repr::Subspace {
                basis, xbar_proj, ..
            } => {
                let p = basis.project(x);
                let off = x - &p;
                xbar_proj * alpha - p - off / h
            }
            Repr::FullLinear { .. } | Repr::FrozenCov { .. } => {
                let r = x - self.implied_mean() * alpha;
                let a2 = alpha * alpha;
                self.cov_apply(&r, |l| -1.0 / (a2 * l + h))
            }
        })
    }

    /// Dense `(C_t, b_t)` with `s(x, t) = C_t x + b_t`.
    pub fn affine_at(&self, t: f64, schedule: &NoiseSchedule) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (alpha, h) = self.coefficients(t, schedule)?;
        let a2 = alpha * alpha;
        let inv = |l: f64| 1.0 / (a2 * l + h);
        let c = -self.cov_matrix(inv);
        let b = self.cov_apply(&self.implied_mean(), inv) * alpha;
        Ok((c, b))
    }

    /// Look-ahead estimate `Ê[x₀|x_t] = (x_t + h s(x_t, t)) / α`.
    pub fn tweedie_mean(&self, x: &DVector<f64>, t: f64, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
        let (alpha, h) = schedule.alpha_h(t)?;
        if alpha < MIN_ALPHA {
            return Err(Error::domain(format!("α(t) = {alpha:e} is too small for the look-ahead estimate")));
        }
        if h == 0.0 {
            Error::check_dim(self.dim(), x.len(), "score input")?;
            return Ok(x.clone());
        }
        let s = self.evaluate(x, t, schedule)?;
        Ok((x + s * h) / alpha)
    }

    /// `∂Ê[x₀|x_t]/∂x_t = αΣ(α²Σ + hI)⁻¹`, independent of `x_t`.
    pub fn tweedie_jacobian(&self, t: f64, schedule: &NoiseSchedule) -> Result<DMatrix<f64>> {
        let (alpha, h) = self.jacobian_coefficients(t, schedule)?;
        let n = self.dim();
        if h == 0.0 {
            return Ok(DMatrix::identity(n, n));
        }
        let a2 = alpha * alpha;
        Ok(self.cov_matrix(|l| alpha * l / (a2 * l + h)))
    }

    /// `J(t) v` without forming the Jacobian.
    pub fn tweedie_jacobian_apply(&self, v: &DVector<f64>, t: f64, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
        Error::check_dim(self.dim(), v.len(), "jacobian input")?;
        let (alpha, h) = self.jacobian_coefficients(t, schedule)?;
        if h == 0.0 {
            return Ok(v.clone());
        }
        let a2 = alpha * alpha;
        Ok(self.cov_apply(v, |l| alpha * l / (a2 * l + h)))
    }

    fn jacobian_coefficients(&self, t: f64, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
        let (alpha, h) = schedule.alpha_h(t)?;
        if alpha < MIN_ALPHA {
            return Err(Error::domain(format!("α(t) = {alpha:e} is too small for the look-ahead estimate")));
        }
        Ok((alpha, h))
    }

    /// `gᵀΣg − α²gᵀΣ(α²Σ + hI)⁻¹Σg`, the variance of `gᵀx₀` given `x_t`.
    pub fn lookahead_variance(&self, g: &DVector<f64>, alpha: f64, h: f64) -> f64 {
        let a2 = alpha * alpha;
        let w = self.cov_apply(g, |l| if l == 0.0 { 0.0 } else { h * l / (a2 * l + h) });
        g.dot(&w)
    }

    /// Split a subspace score into its on-support and orthogonal parts.
    pub fn decompose(&self, x: &DVector<f64>, t: f64, schedule: &NoiseSchedule) -> Result<ScoreDecomposition> {
        let basis = self
            .basis()
            .ok_or_else(|| Error::Unsupported("decomposition needs a subspace model".into()))?;
        let s = self.evaluate(x, t, schedule)?;
        let h = schedule.h(t)?;
        let orthogonal = basis.orthogonal(x) * (-1.0 / h);
        let on_support = s - &orthogonal;
        Ok(ScoreDecomposition {
            on_support,
            orthogonal,
        })
    }

    /// Replace the bias mean, keeping `C_t` untouched.
    pub fn refit_bias_frozen(&self, weighted_mean: &DVector<f64>) -> Result<Self> {
        Error::check_dim(self.dim(), weighted_mean.len(), "weighted mean")?;
        if weighted_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("weighted mean is not finite"));
        }
        match &self.repr {
            Repr::FrozenCov {
                stats, spectrum, ..
            } => Ok(Self {
                repr: Repr::FrozenCov {
                    stats: stats.clone(),
                    spectrum: spectrum.clone(),
                    xbar_w: weighted_mean.clone(),
                },
            }),
            Repr::Subspace { basis, .. } => Self::subspace(basis.clone(), weighted_mean.clone()),
            _ => Err(Error::Unsupported(format!(
                "bias refit needs a frozen_cov or subspace model, got {}",
                self.class().name()
            ))),
        }
    }
}

pub fn fit_mean_only(data: &Dataset) -> LinearScoreModel {
    LinearScoreModel::mean_only(empirical_stats(data).mean)
}

pub fn fit_full_linear(data: &Dataset) -> Result<LinearScoreModel> {
    if data.len() < 2 {
        return Err(Error::domain("full-linear fit needs at least two samples"));
    }
    LinearScoreModel::full_linear(empirical_stats(data))
}

/// Pretrain a full-linear model and freeze its covariance.
pub fn fit_frozen_cov(data: &Dataset) -> Result<LinearScoreModel> {
    fit_full_linear(data)?.freeze()
}

/// Weighted fit over the subspace class.
///
/// Uses the dataset's basis when present; otherwise the column space of the
/// centered samples is recovered.
pub fn fit_subspace(data: &Dataset, weights: Option<&[f64]>) -> Result<LinearScoreModel> {
    let basis = match data.basis() {
        Some(b) => b.clone(),
        None => recover_basis(data, None)?,
    };
    let d = basis.latent_dim();
    let rank = latent_rank(data, &basis);
    if rank < d {
        return Err(Error::RankDeficient { rank, required: d });
    }
    let xbar = match weights {
        Some(w) => weighted_mean(data, w)?,
        None => empirical_stats(data).mean,
    };
    LinearScoreModel::subspace(basis, xbar)
}
