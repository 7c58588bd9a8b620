//! Look-ahead loss guidance `G_loss`, naive guidance and the `β(t)` rules.
//!
//! `G_loss = −β ∇ₓ(y − gᵀÊ[x₀|x_t])² = 2β (y − gᵀÊ) Jᵀg`; the factor 2 is
//! applied explicitly so that `β` matches the theory schedules below.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score::LinearScoreModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceKind {
    Loss,
    Naive,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum BetaRule {
    /// `β = ½[σ² + gᵀΣg − α²gᵀΣ(α²Σ + hI)⁻¹Σg]⁻¹`.
    GaussianTheory,
    /// `β = ½[σ² + h gᵀAAᵀg]⁻¹`.
    SubspaceTheory,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    pub kind: GuidanceKind,
    pub g: DVector<f64>,
    pub y: f64,
    pub sigma: f64,
    pub beta_rule: BetaRule,
    /// Multiplier `γ` on the model score; 1 reproduces plain guidance.
    pub score_scale: f64,
}

impl GuidanceSpec {
    pub fn none(dim: usize) -> Self {
        Self {
            kind: GuidanceKind::None,
            g: DVector::zeros(dim),
            y: 0.0,
            sigma: 1.0,
            beta_rule: BetaRule::GaussianTheory,
            score_scale: 1.0,
        }
    }

    pub fn loss(g: DVector<f64>, y: f64, sigma: f64, beta_rule: BetaRule) -> Self {
        Self {
            kind: GuidanceKind::Loss,
            g,
            y,
            sigma,
            beta_rule,
            score_scale: 1.0,
        }
    }

    pub fn naive(g: DVector<f64>, y: f64, sigma: f64, beta_rule: BetaRule) -> Self {
        Self {
            kind: GuidanceKind::Naive,
            ..Self::loss(g, y, sigma, beta_rule)
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        Error::check_dim(dim, self.g.len(), "guidance gradient")?;
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("guidance.sigma", "must be positive"));
        }
        if let BetaRule::Constant(c) = self.beta_rule {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("guidance.beta_rule", "constant must be positive"));
            }
        }
        if !(self.score_scale > 0.5 && self.score_scale.is_finite()) {
            return Err(Error::config("guidance.score_scale", "must exceed 1/2"));
        }
        if !self.y.is_finite() || self.g.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("guidance", "g and y must be finite"));
        }
        Ok(())
    }
}

/// Guidance strength `β(t)`.
pub fn beta(
    spec: &GuidanceSpec,
    model: &LinearScoreModel,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let s2 = spec.sigma * spec.sigma;
    match spec.beta_rule {
        BetaRule::Constant(c) => Ok(c),
        BetaRule::GaussianTheory => {
            let (alpha, h) = schedule.alpha_h(t)?;
            Ok(0.5 / (s2 + model.lookahead_variance(&spec.g, alpha, h)))
        }
        BetaRule::SubspaceTheory => {
            let basis = model.support_basis().ok_or_else(|| {
                Error::Unsupported("subspace β rule needs a model with a proper support".into())
            })?;
            let h = schedule.h(t)?;
            let gp = basis.matrix().tr_mul(&spec.g);
            Ok(0.5 / (s2 + h * gp.norm_squared()))
        }
    }
}

fn residual(
    spec: &GuidanceSpec,
    model: &LinearScoreModel,
    x: &DVector<f64>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let e = model.tweedie_mean(x, t, schedule)?;
    Ok(spec.y - spec.g.dot(&e))
}

/// `2β(t)(y − gᵀÊ[x₀|x_t]) J(t)ᵀg`.
pub fn g_loss(
    spec: &GuidanceSpec,
    model: &LinearScoreModel,
    x: &DVector<f64>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<DVector<f64>> {
    Error::check_dim(model.dim(), spec.g.len(), "guidance gradient")?;
    if spec.g.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(model.dim()));
    }
    let r = residual(spec, model, x, t, schedule)?;
    let b = beta(spec, model, t, schedule)?;
    // J is symmetric for every linear class.
    let jg = model.tweedie_jacobian_apply(&spec.g, t, schedule)?;
    Ok(jg * (2.0 * b * r))
}

/// `β(t)(y − gᵀÊ[x₀|x_t]) g`.
pub fn g_naive(
    spec: &GuidanceSpec,
    model: &LinearScoreModel,
    x: &DVector<f64>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<DVector<f64>> {
    Error::check_dim(model.dim(), spec.g.len(), "guidance gradient")?;
    if spec.g.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(model.dim()));
    }
    let r = residual(spec, model, x, t, schedule)?;
    let b = beta(spec, model, t, schedule)?;
    Ok(&spec.g * (b * r))
}

/// `γ s(x, t) + G(x, t)`.
pub fn guided_score(
    spec: &GuidanceSpec,
    model: &LinearScoreModel,
    x: &DVector<f64>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<DVector<f64>> {
    let mut s = model.evaluate(x, t, schedule)?;
    if spec.score_scale != 1.0 {
        s *= spec.score_scale;
    }
    match spec.kind {
        GuidanceKind::None => {}
        GuidanceKind::Loss => s += g_loss(spec, model, x, t, schedule)?,
        GuidanceKind::Naive => s += g_naive(spec, model, x, t, schedule)?,
    }
    Ok(s)
}

/// Target `y = η(σ² + gᵀΣg) + gᵀμ` that moves the posterior mean to `μ + ηΣg`.
pub fn target_y(model: &LinearScoreModel, g: &DVector<f64>, sigma: f64, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::config("eta", "must be positive"));
    }
    Error::check_dim(model.dim(), g.len(), "gradient")?;
    let sg = model.cov_apply(g, |l| l);
    Ok(eta * (sigma * sigma + g.dot(&sg)) + g.dot(&model.implied_mean()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{GaussianDist, SubspaceBasis};
    use nalgebra::DMatrix;

    fn scalar_model() -> LinearScoreModel {
        LinearScoreModel::full_linear(GaussianDist {
            mean: DVector::zeros(1),
            cov: DMatrix::identity(1, 1),
        })
        .unwrap()
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn scalar_guidance_values() {
        let m = scalar_model();
        let spec = GuidanceSpec::loss(DVector::from_element(1, 1.0), 1.0, 1.0, BetaRule::GaussianTheory);
        let t = 2f64.ln();
        let b = beta(&spec, &m, t, &sched()).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-15);
        let x = DVector::zeros(1);
        let a = 0.5f64.sqrt();
        let gl = g_loss(&spec, &m, &x, t, &sched()).unwrap();
        assert!((gl[0] - 2.0 * a / 3.0).abs() < 1e-15);
        assert!((gl[0] - 0.4714).abs() < 1e-4);
        let gn = g_naive(&spec, &m, &x, t, &sched()).unwrap();
        assert!((gn[0] - 1.0 / 3.0).abs() < 1e-15);
        let total = guided_score(&spec, &m, &x, t, &sched()).unwrap();
        // Conditional score by hand: −(3/4)⁻¹(0 − α/2).
        assert!((total[0] - (4.0 / 3.0) * (a / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn beta_limits() {
        let m = scalar_model();
        let spec = GuidanceSpec::loss(DVector::from_element(1, 2.0), 0.0, 0.7, BetaRule::GaussianTheory);
        let b0 = beta(&spec, &m, 0.0, &sched()).unwrap();
        assert!((b0 - 1.0 / (2.0 * 0.49)).abs() < 1e-14);

        let basis = SubspaceBasis::canonical(3, 1).unwrap();
        let sm = LinearScoreModel::subspace(basis, DVector::zeros(3)).unwrap();
        let g = DVector::from_vec(vec![0.0, 1.0, -2.0]);
        let spec = GuidanceSpec::loss(g, 1.0, 0.5, BetaRule::SubspaceTheory);
        for &t in &[0.1, 1.0, 7.0] {
            assert!((beta(&spec, &sm, t, &sched()).unwrap() - 2.0).abs() < 1e-15);
        }
        let c = GuidanceSpec::loss(DVector::zeros(3), 0.0, 1.0, BetaRule::Constant(0.25));
        assert_eq!(beta(&c, &sm, 3.0, &sched()).unwrap(), 0.25);
        assert!(beta(&spec, &scalar_model(), 1.0, &sched()).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_guidance() {
        let m = scalar_model();
        let x = DVector::from_element(1, 0.8);
        let t = 1.5;
        let e = m.tweedie_mean(&x, t, &sched()).unwrap();
        let spec = GuidanceSpec::loss(DVector::from_element(1, 2.0), 2.0 * e[0], 1.0, BetaRule::GaussianTheory);
        assert!(g_loss(&spec, &m, &x, t, &sched()).unwrap().norm() < 1e-15);
        assert!(g_naive(&spec, &m, &x, t, &sched()).unwrap().norm() < 1e-15);
    }

    #[test]
    fn none_kind_is_plain_score() {
        let m = scalar_model();
        let x = DVector::from_element(1, 0.3);
        let spec = GuidanceSpec::none(1);
        assert_eq!(
            guided_score(&spec, &m, &x, 0.4, &sched()).unwrap(),
            m.evaluate(&x, 0.4, &sched()).unwrap()
        );
    }

    #[test]
    fn target_y_examples() {
        let m = LinearScoreModel::full_linear(GaussianDist::standard(3)).unwrap();
        let g = DVector::from_vec(vec![0.6, 0.0, 0.8]);
        assert!((target_y(&m, &g, 1.0, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(target_y(&m, &DVector::zeros(3), 1.0, 0.5).unwrap(), 0.5);

        let basis = SubspaceBasis::canonical(3, 1).unwrap();
        let sm = LinearScoreModel::subspace(basis, DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        let off = DVector::from_vec(vec![0.0, 3.0, 0.0]);
        assert!((target_y(&sm, &off, 2.0, 0.25).unwrap() - 1.0).abs() < 1e-15);
        assert!(target_y(&sm, &off, 2.0, 0.0).is_err());
    }

    #[test]
    fn validation() {
        let mut s = GuidanceSpec::loss(DVector::zeros(2), 0.0, 1.0, BetaRule::GaussianTheory);
        assert!(s.validate(2).is_ok());
        assert!(s.validate(3).is_err());
        s.sigma = 0.0;
        assert!(s.validate(2).is_err());
        s.sigma = 1.0;
        s.beta_rule = BetaRule::Constant(-1.0);
        assert!(s.validate(2).is_err());
        s.beta_rule = BetaRule::GaussianTheory;
        s.score_scale = 0.4;
        assert!(s.validate(2).is_err());
    }
}
