//! Concave objectives, their smoothness constants and optimum oracles.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{GaussianDist, SubspaceBasis};
use crate::error::{Error, Result};
use crate::linalg::CovSpectrum;
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// `f(x) = gᵀx`.
    Linear { g: Vec<f64> },
    /// `f(x) = c − (θᵀx − a)²`.
    QuadScalar { theta: Vec<f64>, a: f64, c: f64 },
    /// `f(x) = c0 − w‖x − b‖`.
    DistNorm { b: Vec<f64>, c0: f64, w: f64 },
}

fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

impl Objective {
    pub fn linear(g: &DVector<f64>) -> Self {
        Objective::Linear {
            g: g.as_slice().to_vec(),
        }
    }

    pub fn quad_scalar(theta: &DVector<f64>, a: f64, c: f64) -> Self {
        Objective::QuadScalar {
            theta: theta.as_slice().to_vec(),
            a,
            c,
        }
    }

    pub fn dist_norm(b: &DVector<f64>, c0: f64, w: f64) -> Self {
        Objective::DistNorm {
            b: b.as_slice().to_vec(),
            c0,
            w,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Objective::Linear { g } => g.len(),
            Objective::QuadScalar { theta, .. } => theta.len(),
            Objective::DistNorm { b, .. } => b.len(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        Error::check_dim(dim, self.dim(), "objective dimension")?;
        if let Objective::DistNorm { w, .. } = self {
            if !(*w > 0.0) {
                return Err(Error::config("objective.w", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            Objective::Linear { g } => dvec(g).dot(x),
            Objective::QuadScalar { theta, a, c } => {
                let r = dvec(theta).dot(x) - a;
                c - r * r
            }
            Objective::DistNorm { b, c0, w } => c0 - w * (x - dvec(b)).norm(),
        }
    }

    pub fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Error::check_dim(self.dim(), x.len(), "objective input")?;
        Ok(match self {
            Objective::Linear { g } => dvec(g),
            Objective::QuadScalar { theta, a, .. } => {
                let th = dvec(theta);
                let r = th.dot(x) - a;
                th * (-2.0 * r)
            }
            Objective::DistNorm { b, w, .. } => {
                let d = x - dvec(b);
                let n = d.norm();
                if n == 0.0 {
                    return Err(Error::domain("distance objective is not differentiable at b"));
                }
                d * (-w / n)
            }
        })
    }

    /// Euclidean smoothness constant; `None` when not smooth.
    pub fn smoothness(&self) -> Option<f64> {
        match self {
            Objective::Linear { .. } => Some(0.0),
            Objective::QuadScalar { theta, .. } => Some(2.0 * dvec(theta).norm_squared()),
            Objective::DistNorm { .. } => None,
        }
    }

    /// Smoothness with respect to the `Σ⁻¹` semi-norm, `2θᵀΣθ` for the quadratic.
    pub fn smoothness_adapted(&self, cov: &nalgebra::DMatrix<f64>) -> Option<f64> {
        match self {
            Objective::Linear { .. } => Some(0.0),
            Objective::QuadScalar { theta, .. } => {
                let th = dvec(theta);
                Some(2.0 * th.dot(&(cov * &th)))
            }
            Objective::DistNorm { .. } => None,
        }
    }

    /// Supremum over all of `R^D`, when finite.
    pub fn sup(&self) -> Option<f64> {
        match self {
            Objective::Linear { g } if g.iter().all(|&v| v == 0.0) => Some(0.0),
            Objective::Linear { .. } => None,
            Objective::QuadScalar { theta, a, c } => {
                if theta.iter().any(|&v| v != 0.0) {
                    Some(*c)
                } else {
                    Some(c - a * a)
                }
            }
            Objective::DistNorm { c0, .. } => Some(*c0),
        }
    }
}

/// `argmax f(x) − (λ/2)‖x − μ̄‖²_{Σ̄⁺}`, with `x − μ̄` restricted to the range of
/// `Σ̄` (and to `Span(A)` when a basis is supplied).
pub fn regularized_opt(
    obj: &Objective,
    stats: &GaussianDist,
    lambda: f64,
    basis: Option<&SubspaceBasis>,
) -> Result<DVector<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::config("lambda", "must be positive"));
    }
    obj.validate(stats.dim())?;
    let (mu, cov) = match basis {
        Some(b) => {
            let p = b.projector();
            (&p * &stats.mean, &p * &stats.cov * &p)
        }
        None => (stats.mean.clone(), stats.cov.clone()),
    };
    match obj {
        Objective::Linear { g } => Ok(&mu + &cov * dvec(g) / lambda),
        Objective::QuadScalar { theta, a, .. } => {
            let th = dvec(theta);
            let st = &cov * &th;
            let kappa = th.dot(&st);
            let s = (th.dot(&mu) + 2.0 * a * kappa / lambda) / (1.0 + 2.0 * kappa / lambda);
            Ok(&mu - st * (2.0 * (s - a) / lambda))
        }
        Objective::DistNorm { b, w, .. } => dist_norm_opt(&dvec(b), *w, &mu, &cov, lambda),
    }
}

/// Maximizer of `c0 − w‖x − b‖ − (λ/2)‖x − μ‖²_{Σ⁺}` over `x ∈ μ + range(Σ)`.
///
/// In eigen-coordinates `x = μ + Q z` stationarity gives
/// `z_i = s λ_i c_i / (1 + s λ_i)` with `c = Qᵀ(b − μ)`, where the scalar `s`
/// solves `s ‖x(s) − b‖ = w/λ`; the left side is increasing in `s`.
fn dist_norm_opt(
    b: &DVector<f64>,
    w: f64,
    mu: &DVector<f64>,
    cov: &nalgebra::DMatrix<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    let spec = CovSpectrum::new(cov)?;
    let r = spec.rank();
    if r == 0 || w == 0.0 {
        return Ok(mu.clone());
    }
    let q = spec.range_basis();
    let lam = spec.eigenvalues().rows(0, r).into_owned();
    let d = b - mu;
    let c = q.tr_mul(&d);
    let e2 = (&d - &q * &c).norm_squared();
    let target = w / lambda;
    let psi = |s: f64| -> f64 {
        let on: f64 = (0..r).map(|i| (s * c[i] / (1.0 + s * lam[i])).powi(2)).sum();
        (on + s * s * e2).sqrt()
    };
    let at = |s: f64| -> DVector<f64> {
        let z = DVector::from_fn(r, |i, _| s * lam[i] * c[i] / (1.0 + s * lam[i]));
        mu + &q * z
    };
    // Beyond this the optimum sits on the kink x = b.
    let kink = || mu + &q * &c;
    if e2 == 0.0 {
        let limit = (0..r).map(|i| (c[i] / lam[i]).powi(2)).sum::<f64>().sqrt();
        if target >= limit {
            return Ok(kink());
        }
    }
    let mut hi = 1.0;
    let mut doublings = 0;
    while psi(hi) < target {
        hi *= 2.0;
        doublings += 1;
        if doublings > 2000 || !hi.is_finite() {
            return Ok(kink());
        }
    }
    let mut lo = 0.0;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if psi(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(at(0.5 * (lo + hi)))
}

/// `max {f(x) : x ∈ Span(A)}` and a (minimum-norm) maximizer.
pub fn span_opt(obj: &Objective, basis: &SubspaceBasis) -> Result<(DVector<f64>, f64)> {
    obj.validate(basis.ambient_dim())?;
    let n = basis.ambient_dim();
    match obj {
        Objective::Linear { g } => {
            let gv = dvec(g);
            if basis.project(&gv).norm() > 1e-12 * gv.norm() {
                return Err(Error::Unbounded);
            }
            Ok((DVector::zeros(n), 0.0))
        }
        Objective::QuadScalar { theta, a, c } => {
            let tp = basis.project(&dvec(theta));
            let k = tp.norm_squared();
            if k == 0.0 {
                Ok((DVector::zeros(n), c - a * a))
            } else {
                Ok((tp * (a / k), *c))
            }
        }
        Objective::DistNorm { b, c0, w } => {
            let bv = dvec(b);
            let x = basis.project(&bv);
            let f = c0 - w * (&bv - &x).norm();
            Ok((x, f))
        }
    }
}

/// Unit-on-support vector `θ = θ_∥ + θ_⊥` with `‖θ_⊥‖/‖θ_∥‖ = ratio` and
/// `‖θ_∥‖ = 1`, directions drawn from `seed`.
pub fn theta_with_ratio(basis: &SubspaceBasis, ratio: f64, seed: u64) -> Result<DVector<f64>> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::config("ratio", "must be finite and nonnegative"));
    }
    let n = basis.ambient_dim();
    let mut rng = stream_rng(seed, 0);
    let u = DVector::from_fn(basis.latent_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let on = (basis.matrix() * u).normalize();
    if ratio == 0.0 {
        return Ok(on);
    }
    if basis.latent_dim() == n {
        return Err(Error::domain("basis spans the whole space; no orthogonal direction"));
    }
    let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let off = basis.orthogonal(&v).normalize();
    Ok(on + off * ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn quad_scalar_peak() {
        let th = DVector::from_vec(vec![1.0, 0.0]);
        let f = Objective::quad_scalar(&th, 3.0, 10.0);
        let x = DVector::from_vec(vec![3.0, 0.0]);
        assert_eq!(f.value(&x), 10.0);
        assert_eq!(f.grad(&x).unwrap(), DVector::zeros(2));
        assert_eq!(f.smoothness(), Some(2.0));
    }

    #[test]
    fn linear_grad_is_constant() {
        let g = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let f = Objective::linear(&g);
        assert_eq!(f.grad(&DVector::from_vec(vec![7.0, 1.0, 2.0])).unwrap(), g);
        assert_eq!(f.smoothness(), Some(0.0));
    }

    #[test]
    fn dist_norm_kink() {
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let f = Objective::dist_norm(&b, 5.0, 0.5);
        assert!(f.grad(&b).is_err());
        assert_eq!(f.smoothness(), None);
        assert_eq!(f.value(&b), 5.0);
    }

    #[test]
    fn regularized_examples() {
        let stats = GaussianDist::standard(3);
        let g = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let x = regularized_opt(&Objective::linear(&g), &stats, 2.0, None).unwrap();
        assert!((x - &g / 2.0).norm() < 1e-15);
        let x = regularized_opt(&Objective::linear(&g), &stats, 1e6, None).unwrap();
        assert!(x.norm() < 1e-4 * g.norm());

        let one = GaussianDist::standard(1);
        let f = Objective::quad_scalar(&DVector::from_element(1, 1.0), 3.0, 10.0);
        for &lam in &[0.01, 0.5, 2.0, 7.0] {
            let x = regularized_opt(&f, &one, lam, None).unwrap();
            assert!((x[0] - 6.0 / (2.0 + lam)).abs() < 1e-12);
        }
    }

    #[test]
    fn regularized_dist_norm_is_stationary() {
        let stats = GaussianDist {
            mean: DVector::from_vec(vec![0.0, 0.5, 0.0]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 0.0])),
        };
        let b = DVector::from_vec(vec![3.0, -2.0, 1.0]);
        let f = Objective::dist_norm(&b, 5.0, 0.5);
        let lam = 0.3;
        let x = regularized_opt(&f, &stats, lam, None).unwrap();
        // x − μ = Σ∇f(x)/λ on the range, zero elsewhere.
        let resid = &x - &stats.mean - &stats.cov * f.grad(&x).unwrap() / lam;
        assert!(resid.norm() < 1e-9, "{resid}");
        assert_eq!(x[2], 0.0);
    }

    #[test]
    fn span_opt_examples() {
        let basis = SubspaceBasis::random(8, 3, 5).unwrap();
        let th = theta_with_ratio(&basis, 9.0, 2).unwrap();
        let f = Objective::quad_scalar(&th, 3.0, 10.0);
        let (x, fs) = span_opt(&f, &basis).unwrap();
        assert_eq!(fs, 10.0);
        assert!((basis.project(&th).dot(&x) - 3.0).abs() < 1e-12);
        assert!((f.value(&x) - 10.0).abs() < 1e-12);

        let off = basis.orthogonal(&DVector::from_element(8, 1.0));
        let (x, fs) = span_opt(&Objective::linear(&off), &basis).unwrap();
        assert_eq!((x.norm(), fs), (0.0, 0.0));
        let on = basis.project(&DVector::from_element(8, 1.0));
        assert!(matches!(span_opt(&Objective::linear(&on), &basis), Err(Error::Unbounded)));
    }

    #[test]
    fn theta_ratio_is_exact() {
        let basis = SubspaceBasis::random(64, 16, 1).unwrap();
        let th = theta_with_ratio(&basis, 9.0, 3).unwrap();
        let r = basis.orthogonal(&th).norm() / basis.project(&th).norm();
        assert!((r - 9.0).abs() < 1e-12);
        assert!((basis.project(&th).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn toml_form() {
        let f: Objective = toml::from_str("kind = \"quad_scalar\"\ntheta = [1.0, 0.0]\na = 3\nc = 10").unwrap();
        assert_eq!(f, Objective::quad_scalar(&DVector::from_vec(vec![1.0, 0.0]), 3.0, 10.0));
    }
}
