//! Forecast error model for solar availability and demand.
//!
//! Each uncertain injection carries an error half-width that grows with the
//! forecast lead time and resets whenever a new forecast is issued.
//! Demand errors scale the load along its own power-factor direction;
//! solar errors are real power.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::linalg::C64;
use crate::phase::Phase;
use crate::series::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Solar,
    Demand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorFamily {
    Uniform,
    Gaussian,
    /// Symmetric triangular density on `[-e, e]`.
    CustomUnimodal,
}

impl ErrorFamily {
    /// Variance of a zero-mean error with half-width `e`. Gaussian errors
    /// take `e` as three standard deviations.
    pub fn variance(self, e: f64) -> f64 {
        match self {
            ErrorFamily::Uniform => e * e / 3.0,
            ErrorFamily::Gaussian => e * e / 9.0,
            ErrorFamily::CustomUnimodal => e * e / 6.0,
        }
    }

    fn inverse_cdf(self, u: f64, e: f64) -> f64 {
        match self {
            ErrorFamily::Uniform => e * (2.0 * u - 1.0),
            ErrorFamily::Gaussian => e / 3.0 * StatNormal::standard().inverse_cdf(u),
            ErrorFamily::CustomUnimodal => {
                if u < 0.5 {
                    e * ((2.0 * u).sqrt() - 1.0)
                } else {
                    e * (1.0 - (2.0 * (1.0 - u)).sqrt())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UncertainInjection {
    pub bus: usize,
    pub phase: Phase,
    pub quantity: Quantity,
}

/// Piecewise-linear relative half-width over lead time (steps), linearly
/// extrapolated past the last point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GrowthCurve {
    pub points: Vec<(f64, f64)>,
}

impl Default for GrowthCurve {
    fn default() -> Self {
        GrowthCurve {
            points: vec![(0.0, 0.02), (30.0, 0.30), (60.0, 0.58)],
        }
    }
}

impl GrowthCurve {
    pub fn constant(value: f64) -> Self {
        GrowthCurve {
            points: vec![(0.0, value)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Config("growth curve needs at least one point".into()));
        }
        for w in self.points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Config("growth curve leads must increase".into()));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::Config("growth curve must be nondecreasing".into()));
            }
        }
        if self.points.iter().any(|&(l, v)| !(l >= 0.0 && v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("growth curve values must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn at(&self, lead: f64) -> f64 {
        let p = &self.points;
        if p.len() == 1 || lead <= p[0].0 {
            return p[0].1;
        }
        let seg = p
            .windows(2)
            .position(|w| lead <= w[1].0)
            .unwrap_or(p.len() - 2);
        let (l0, v0) = p[seg];
        let (l1, v1) = p[seg + 1];
        v0 + (v1 - v0) * (lead - l0) / (l1 - l0)
    }
}

/// Uncertainty block of the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub family: ErrorFamily,
    pub growth: GrowthCurve,
    /// Demand half-width relative to the solar one.
    pub demand_scale: f64,
    pub refresh_period: usize,
    /// Correlation matrix over the injection registry; independent if absent.
    pub correlation: Option<Vec<Vec<f64>>>,
    /// Multiplies every half-width; 0 switches uncertainty off.
    pub scale: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            family: ErrorFamily::Uniform,
            growth: GrowthCurve::default(),
            demand_scale: 0.2,
            refresh_period: 30,
            correlation: None,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UncertaintyModel {
    pub config: UncertaintyConfig,
    pub injections: Vec<UncertainInjection>,
    /// Lower Cholesky factor of the correlation matrix.
    chol: Option<DMatrix<f64>>,
}

impl UncertaintyModel {
    /// Registers every non-slack bus phase with nonzero solar or demand in
    /// `series`.
    pub fn new(model: &FeederModel, series: &TimeSeries, config: UncertaintyConfig) -> Result<Self> {
        let mut injections = Vec::new();
        for (b, p) in model.bus_phases() {
            let steps = 0..series.steps();
            if steps.clone().any(|t| series.solar(b, p, t) != 0.0) {
                injections.push(UncertainInjection {
                    bus: b,
                    phase: p,
                    quantity: Quantity::Solar,
                });
            }
            if steps.clone().any(|t| series.demand(b, p, t) != C64::default()) {
                injections.push(UncertainInjection {
                    bus: b,
                    phase: p,
                    quantity: Quantity::Demand,
                });
            }
        }
        Self::with_injections(injections, config)
    }

    pub fn with_injections(injections: Vec<UncertainInjection>, config: UncertaintyConfig) -> Result<Self> {
        config.growth.validate()?;
        if config.refresh_period == 0 {
            return Err(Error::Config("refresh period must be positive".into()));
        }
        if !(config.demand_scale >= 0.0 && config.scale >= 0.0) {
            return Err(Error::Config("uncertainty scales must be nonnegative".into()));
        }
        let chol = match &config.correlation {
            None => None,
            Some(rows) => {
                let n = injections.len();
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Config(format!(
                        "correlation matrix must be {n}x{n} over the injection registry"
                    )));
                }
                let c = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
                if (0..n).any(|i| (c[(i, i)] - 1.0).abs() > 1e-9) || (&c - c.transpose()).amax() > 1e-9 {
                    return Err(Error::Config("correlation matrix must be symmetric with unit diagonal".into()));
                }
                let chol = c
                    .cholesky()
                    .ok_or_else(|| Error::Config("correlation matrix is not positive definite".into()))?;
                Some(chol.l())
            }
        };
        Ok(UncertaintyModel {
            config,
            injections,
            chol,
        })
    }

    /// No uncertainty at all.
    pub fn none() -> Self {
        UncertaintyModel {
            config: UncertaintyConfig {
                scale: 0.0,
                ..UncertaintyConfig::default()
            },
            injections: Vec::new(),
            chol: None,
        }
    }

    pub fn len(&self) -> usize {
        self.injections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.injections.is_empty()
    }

    /// Lead time of the forecast in force at closed-loop step `t`.
    pub fn refresh_lead(&self, t: usize) -> usize {
        t % self.config.refresh_period
    }

    /// Complex injection change per unit error of injection `i` at step `t`.
    pub fn direction(&self, series: &TimeSeries, i: usize, t: usize) -> C64 {
        let inj = &self.injections[i];
        match inj.quantity {
            Quantity::Solar => C64::new(1.0, 0.0),
            Quantity::Demand => {
                let d = series.demand(inj.bus, inj.phase, t);
                if d.norm() > 0.0 {
                    -d / d.norm()
                } else {
                    C64::new(-1.0, 0.0)
                }
            }
        }
    }

    /// Half-widths at target step `t` for a forecast of lead `lead`.
    pub fn half_widths(&self, series: &TimeSeries, t: usize, lead: usize) -> Vec<f64> {
        let rel = self.config.growth.at(lead as f64) * self.config.scale;
        self.injections
            .iter()
            .map(|inj| match inj.quantity {
                Quantity::Solar => rel * series.solar(inj.bus, inj.phase, t).abs(),
                Quantity::Demand => {
                    rel * self.config.demand_scale * series.demand(inj.bus, inj.phase, t).norm()
                }
            })
            .collect()
    }

    /// Covariance over the injection registry for the given half-widths.
    pub fn covariance(&self, half_widths: &[f64]) -> DMatrix<f64> {
        let sd: Vec<f64> = half_widths
            .iter()
            .map(|&e| self.config.family.variance(e).sqrt())
            .collect();
        let n = sd.len();
        match &self.chol {
            None => DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| sd[i] * sd[i])),
            Some(l) => {
                let c = l * l.transpose();
                DMatrix::from_fn(n, n, |i, j| sd[i] * c[(i, j)] * sd[j])
            }
        }
    }

    pub fn covariance_at(&self, series: &TimeSeries, t: usize, lead: usize) -> DMatrix<f64> {
        self.covariance(&self.half_widths(series, t, lead))
    }

    /// Sampled errors for closed-loop steps `0..steps` of one scenario,
    /// with leads following the refresh schedule.
    pub fn sample_realization(&self, series: &TimeSeries, steps: usize, seed: u64, scenario: u64) -> Realization {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(scenario);
        let family = self.config.family;
        let errors = (0..steps)
            .map(|t| {
                let e = self.half_widths(series, t, self.refresh_lead(t));
                match &self.chol {
                    None => e
                        .iter()
                        .map(|&e| {
                            let u = unit(&mut rng);
                            if e > 0.0 { family.inverse_cdf(u, e) } else { 0.0 }
                        })
                        .collect(),
                    Some(l) => {
                        // Gaussian copula
                        let phi = StatNormal::standard();
                        let z = DVector::from_fn(e.len(), |_, _| phi.inverse_cdf(unit(&mut rng)));
                        let z = l * z;
                        e.iter()
                            .zip(z.iter())
                            .map(|(&e, &z)| {
                                let u = phi.cdf(z).clamp(1e-15, 1.0 - 1e-15);
                                if e > 0.0 { family.inverse_cdf(u, e) } else { 0.0 }
                            })
                            .collect()
                    }
                }
            })
            .collect();
        Realization {
            seed,
            scenario,
            errors,
        }
    }
}

/// Uniform draw on the open unit interval.
fn unit(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    u.clamp(1e-15, 1.0 - 1e-15)
}

/// Additive errors of one scenario, `[step][injection]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub seed: u64,
    pub scenario: u64,
    pub errors: Vec<Vec<f64>>,
}

impl Realization {
    pub fn zero(steps: usize, n: usize) -> Self {
        Realization {
            seed: 0,
            scenario: 0,
            errors: vec![vec![0.0; n]; steps],
        }
    }

    /// Realized demand and solar availability at step `t`: forecast plus
    /// error, with solar clipped at zero.
    pub fn apply(&self, unc: &UncertaintyModel, forecast: &TimeSeries, t: usize) -> TimeSeries {
        let mut out = forecast.window(t, 1);
        for (i, inj) in unc.injections.iter().enumerate() {
            let err = self.errors[t][i];
            match inj.quantity {
                Quantity::Solar => {
                    let p = out.solar(inj.bus, inj.phase, 0) + err;
                    out.set_solar(inj.bus, inj.phase, 0, p.max(0.0));
                }
                Quantity::Demand => {
                    // injection direction is minus the load direction
                    let d = out.demand(inj.bus, inj.phase, 0) - unc.direction(forecast, i, t) * err;
                    out.set_demand(inj.bus, inj.phase, 0, d);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two(e: &[f64]) -> UncertaintyModel {
        let inj = e
            .iter()
            .enumerate()
            .map(|(i, _)| UncertainInjection {
                bus: 1,
                phase: Phase::from_index(i).unwrap(),
                quantity: Quantity::Solar,
            })
            .collect();
        UncertaintyModel::with_injections(inj, UncertaintyConfig::default()).unwrap()
    }

    #[test]
    fn uniform_variance() {
        assert_eq!(ErrorFamily::Uniform.variance(0.0), 0.0);
        assert!((ErrorFamily::Uniform.variance(0.3) - 0.03).abs() < 1e-15);
        let m = two(&[0.3, 0.06]);
        let s = m.covariance(&[0.3, 0.06]);
        assert!((s[(0, 0)] - 0.03).abs() < 1e-15);
        assert!((s[(1, 1)] - 0.0012).abs() < 1e-15);
        assert_eq!(s[(0, 1)], 0.0);
    }

    #[test]
    fn growth_curve() {
        let g = GrowthCurve::default();
        assert_eq!(g.at(0.0), 0.02);
        assert!((g.at(30.0) - 0.30).abs() < 1e-15);
        assert!((g.at(15.0) - 0.16).abs() < 1e-12);
        assert!((g.at(90.0) - 0.86).abs() < 1e-12);
        assert!(GrowthCurve { points: vec![(0.0, 0.3), (10.0, 0.1)] }.validate().is_err());
    }

    #[test]
    fn refresh() {
        let m = two(&[0.1]);
        assert_eq!(m.refresh_lead(0), 0);
        assert_eq!(m.refresh_lead(29), 29);
        assert_eq!(m.refresh_lead(30), 0);
    }

    #[test]
    fn inverse_cdfs_are_symmetric() {
        for f in [ErrorFamily::Uniform, ErrorFamily::Gaussian, ErrorFamily::CustomUnimodal] {
            for u in [0.01, 0.2, 0.4] {
                let a = f.inverse_cdf(u, 1.0);
                let b = f.inverse_cdf(1.0 - u, 1.0);
                assert!((a + b).abs() < 1e-9, "{f:?} {u}");
            }
            assert!(f.inverse_cdf(0.5, 1.0).abs() < 1e-12);
        }
        assert_eq!(ErrorFamily::CustomUnimodal.inverse_cdf(1e-300, 2.0), -2.0);
    }

    #[test]
    fn correlation_checked() {
        let inj = vec![
            UncertainInjection { bus: 1, phase: Phase::A, quantity: Quantity::Solar },
            UncertainInjection { bus: 1, phase: Phase::B, quantity: Quantity::Solar },
        ];
        let bad = UncertaintyConfig {
            correlation: Some(vec![vec![1.0, 2.0], vec![2.0, 1.0]]),
            ..UncertaintyConfig::default()
        };
        assert!(UncertaintyModel::with_injections(inj.clone(), bad).is_err());
        let ok = UncertaintyConfig {
            correlation: Some(vec![vec![1.0, 0.5], vec![0.5, 1.0]]),
            ..UncertaintyConfig::default()
        };
        let m = UncertaintyModel::with_injections(inj, ok).unwrap();
        let s = m.covariance(&[0.3, 0.3]);
        assert!((s[(0, 1)] - 0.015).abs() < 1e-12);
    }
}
