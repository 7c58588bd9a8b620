//! Forward-process noise schedule `q(t)` and the derived coefficients
//! `α(t) = exp(−½∫₀ᵗ q)` and `h(t) = 1 − α(t)²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rate function of the forward Ornstein–Uhlenbeck process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateKind {
    /// `q(t) ≡ rate`.
    Constant { rate: f64 },
    /// Piecewise-linear interpolation of `(time, rate)` knots.
    Tabulated { knots: Vec<(f64, f64)> },
}

/// On-disk form of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(flatten)]
    pub rate: RateKind,
    pub horizon: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            rate: RateKind::Constant { rate: 1.0 },
            horizon: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    /// Cumulative integral of `q` at each knot (tabulated only).
    cumulative: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::constant(1.0, 10.0).expect("default schedule is valid")
    }
}

impl TryFrom<ScheduleSpec> for NoiseSchedule {
    type Error = Error;

    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        Self::new(spec)
    }
}

impl From<NoiseSchedule> for ScheduleSpec {
    fn from(s: NoiseSchedule) -> Self {
        s.spec
    }
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
            return Err(Error::config("schedule.horizon", "must be positive and finite"));
        }
        let cumulative = match &spec.rate {
            RateKind::Constant { rate } => {
                if !(*rate > 0.0 && rate.is_finite()) {
                    return Err(Error::config("schedule.rate", "must be positive and finite"));
                }
                Vec::new()
            }
            RateKind::Tabulated { knots } => validate_knots(knots, spec.horizon)?,
        };
        Ok(Self { spec, cumulative })
    }

    pub fn constant(rate: f64, horizon: f64) -> Result<Self> {
        Self::new(ScheduleSpec {
            rate: RateKind::Constant { rate },
            horizon,
        })
    }

    pub fn tabulated(knots: Vec<(f64, f64)>, horizon: f64) -> Result<Self> {
        Self::new(ScheduleSpec {
            rate: RateKind::Tabulated { knots },
            horizon,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.spec.horizon
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.spec.horizon).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.spec.horizon,
            });
        }
        Ok(())
    }

    /// `q(t)`.
    pub fn rate(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(match &self.spec.rate {
            RateKind::Constant { rate } => *rate,
            RateKind::Tabulated { knots } => {
                let i = segment(knots, t);
                let (t0, q0) = knots[i];
                let (t1, q1) = knots[i + 1];
                q0 + (q1 - q0) * (t - t0) / (t1 - t0)
            }
        })
    }

    /// `∫₀ᵗ q(s) ds`, exact for both kinds.
    pub fn integrated_rate(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(match &self.spec.rate {
            RateKind::Constant { rate } => rate * t,
            RateKind::Tabulated { knots } => {
                let i = segment(knots, t);
                let (t0, q0) = knots[i];
                let (t1, q1) = knots[i + 1];
                let s = t - t0;
                let slope = (q1 - q0) / (t1 - t0);
                self.cumulative[i] + q0 * s + 0.5 * slope * s * s
            }
        })
    }

    /// `(α(t), h(t))`.
    pub fn alpha_h(&self, t: f64) -> Result<(f64, f64)> {
        let big_q = self.integrated_rate(t)?;
        let alpha = (-0.5 * big_q).exp();
        let h = -(-big_q).exp_m1();
        Ok((alpha, h))
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_h(t)?.0)
    }

    pub fn h(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_h(t)?.1)
    }
}

/// The schedule `h(t) = 1 − exp(−√t)`, which is not generated by any rate above.
pub fn h_sqrt_schedule(t: f64) -> f64 {
    -(-t.max(0.0).sqrt()).exp_m1()
}

fn segment(knots: &[(f64, f64)], t: f64) -> usize {
    // Index i with knots[i].0 <= t <= knots[i+1].0.
    let idx = knots.partition_point(|&(kt, _)| kt <= t);
    idx.saturating_sub(1).min(knots.len() - 2)
}

fn validate_knots(knots: &[(f64, f64)], horizon: f64) -> Result<Vec<f64>> {
    let field = "schedule.knots";
    if knots.len() < 2 {
        return Err(Error::config(field, "need at least two knots"));
    }
    if knots[0].0 != 0.0 {
        return Err(Error::config(field, "first knot must be at t = 0"));
    }
    if knots[knots.len() - 1].0 < horizon {
        return Err(Error::config(field, "knots must cover the horizon"));
    }
    for w in knots.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::config(field, "knot times must be strictly increasing"));
        }
        if w[0].1 == 0.0 && w[1].1 == 0.0 {
            return Err(Error::config(field, "rate vanishes on a whole segment"));
        }
    }
    if knots.iter().any(|&(t, q)| !t.is_finite() || !q.is_finite() || q < 0.0) {
        return Err(Error::config(field, "rates must be finite and nonnegative"));
    }
    let mut cumulative = Vec::with_capacity(knots.len());
    let mut acc = 0.0;
    cumulative.push(acc);
    for w in knots.windows(2) {
        acc += 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0);
        cumulative.push(acc);
    }
    Ok(cumulative)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::adaptive_simpson;

    #[test]
    fn constant_rate_closed_forms() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_h(0.0).unwrap(), (1.0, 0.0));
        let (a, h) = s.alpha_h(4f64.ln()).unwrap();
        assert!((a - 0.5).abs() < 1e-15);
        assert!((h - 0.75).abs() < 1e-15);
    }

    #[test]
    fn tabulated_linear_rate_matches_numeric_quadrature() {
        let s = NoiseSchedule::tabulated(vec![(0.0, 0.0), (1.0, 2.0)], 1.0).unwrap();
        let q = |t: f64| 2.0 * t;
        let half = adaptive_simpson(&|t| 0.5 * q(t), 0.0, 1.0, 1e-14).unwrap();
        let a = s.alpha(1.0).unwrap();
        assert!((a - (-half).exp()).abs() < 1e-12);
        assert!((a - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn tabulated_multi_segment_quadrature() {
        let knots = vec![(0.0, 1.0), (0.5, 3.0), (2.0, 0.5), (4.0, 2.0)];
        let s = NoiseSchedule::tabulated(knots, 4.0).unwrap();
        for &t in &[0.1, 0.5, 0.77, 2.0, 3.3, 4.0] {
            let num = adaptive_simpson(&|u| s.rate(u).unwrap(), 0.0, t, 1e-13).unwrap();
            assert!((s.integrated_rate(t).unwrap() - num).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn out_of_range_is_an_error() {
        let s = NoiseSchedule::default();
        assert!(matches!(s.alpha_h(-0.1), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(s.alpha_h(10.5), Err(Error::TimeOutOfRange { .. })));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(NoiseSchedule::constant(0.0, 1.0).is_err());
        assert!(NoiseSchedule::constant(1.0, -1.0).is_err());
        assert!(NoiseSchedule::tabulated(vec![(0.0, 1.0)], 1.0).is_err());
        assert!(NoiseSchedule::tabulated(vec![(0.0, 1.0), (0.5, 1.0)], 1.0).is_err());
        assert!(NoiseSchedule::tabulated(vec![(0.0, 0.0), (0.5, 0.0), (1.0, 1.0)], 1.0).is_err());
    }

    #[test]
    fn sqrt_schedule_values() {
        assert_eq!(h_sqrt_schedule(0.0), 0.0);
        assert!((h_sqrt_schedule(1.0) - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert!((h_sqrt_schedule(4.0) - 0.86466).abs() < 1e-5);
    }

    #[test]
    fn toml_round_trip() {
        let s = NoiseSchedule::tabulated(vec![(0.0, 1.0), (10.0, 2.0)], 10.0).unwrap();
        let text = toml::to_string(&s).unwrap();
        let back: NoiseSchedule = toml::from_str(&text).unwrap();
        assert_eq!(s, back);
        let c: NoiseSchedule = toml::from_str("kind = \"constant\"\nrate = 1\nhorizon = 10").unwrap();
        assert_eq!(c, NoiseSchedule::default());
    }
}
