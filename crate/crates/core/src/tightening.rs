//! Chance-constraint tightening: sensitivities of the constrained quantities
//! to uncertain injections, distribution safety factors, and the resulting
//! uncertainty margins.
//!
//! A row `Y` with sensitivity `g` under covariance `Sigma` is tightened by
//! `lambda = f^{-1}(1 - alpha) * sqrt(g' Sigma g)`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bounds::{line_rows, StepBounds, TightenedBounds};
use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::linalg::C64;
use crate::linearize::{line_powers, squared_voltages, Linearization};
use crate::loadflow::{solve_loadflow_with, DerSetpoint, InjectionSet, LoadFlowOptions, NetworkState};
use crate::recovery::FeasibleOperatingPoint;
use crate::series::TimeSeries;
use crate::uncertainty::{Quantity, UncertaintyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SafetyDistribution {
    Gaussian,
    Chebyshev,
    Unimodal,
}

/// `f^{-1}(1 - alpha)` for `alpha` in `(0, 0.5)`.
pub fn safety_factor(dist: SafetyDistribution, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::Config(format!("violation probability {alpha} outside (0, 0.5)")));
    }
    Ok(match dist {
        SafetyDistribution::Gaussian => Normal::standard().inverse_cdf(1.0 - alpha),
        SafetyDistribution::Chebyshev => ((1.0 - alpha) / alpha).sqrt(),
        SafetyDistribution::Unimodal => ((1.0 - alpha) / (std::f64::consts::E * alpha)).powf(1.0 / 1.95),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    pub alpha_v: f64,
    pub alpha_l: f64,
    pub alpha_s: f64,
    pub distribution: SafetyDistribution,
    pub tighten_voltage: bool,
    pub tighten_lines: bool,
    pub tighten_solar: bool,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            alpha_v: 0.10,
            alpha_l: 0.10,
            alpha_s: 0.10,
            distribution: SafetyDistribution::Unimodal,
            tighten_voltage: true,
            tighten_lines: false,
            tighten_solar: false,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_v", self.alpha_v), ("alpha_l", self.alpha_l), ("alpha_s", self.alpha_s)] {
            if !(a > 0.0 && a < 0.5) {
                return Err(Error::Config(format!("{name} = {a} outside (0, 0.5)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowFamily {
    Voltage,
    Line,
    Solar,
}

impl RowFamily {
    pub fn label(self) -> &'static str {
        match self {
            RowFamily::Voltage => "voltage",
            RowFamily::Line => "line",
            RowFamily::Solar => "solar",
        }
    }
}

/// Sensitivities of every constrained quantity at one operating point.
///
/// Voltage rows are squared magnitudes, line rows `|S_aa|`, solar rows
/// `|S^S|`. Where `|S| = 0` the gradient is undefined and the row keeps the
/// real and imaginary component sensitivities instead; its margin uses both.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    pub step: usize,
    pub voltage: DMatrix<f64>,
    pub line: DMatrix<f64>,
    /// Imaginary-component rows for line rows at zero flow.
    pub line_alt: Vec<Option<Vec<f64>>>,
    pub solar: DMatrix<f64>,
}

impl SensitivityMatrix {
    pub fn columns(&self) -> usize {
        self.voltage.ncols()
    }
}

/// Constrained quantities at a state, in registry order.
pub fn constrained_quantities(model: &FeederModel, state: &NetworkState, setpoints: &[DerSetpoint]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let w = squared_voltages(model, state);
    let l = line_powers(model, state).iter().map(|s| s.norm()).collect();
    let s = model.solar_ders().map(|(d, _, _)| setpoints[d].solar.norm()).collect();
    (w, l, s)
}

fn solar_row(model: &FeederModel, bus: usize, phase: crate::phase::Phase) -> Option<usize> {
    model
        .solar_ders()
        .position(|(_, der, _)| der.bus == bus && der.phase == phase)
}

/// Analytic sensitivities at an AC-exact point. Falls back to central
/// finite differences when the linearization is singular.
pub fn compute_sensitivities(
    model: &FeederModel,
    series: &TimeSeries,
    point: &FeasibleOperatingPoint,
    unc: &UncertaintyModel,
) -> Result<SensitivityMatrix> {
    match Linearization::new(model, &point.state) {
        Ok(lin) => Ok(analytic(model, series, point, unc, &lin)),
        Err(e) => {
            log::warn!("step {}: {e}; using finite differences", point.step);
            finite_difference_sensitivities(model, series, point, unc, 1e-4)
        }
    }
}

fn analytic(
    model: &FeederModel,
    series: &TimeSeries,
    point: &FeasibleOperatingPoint,
    unc: &UncertaintyModel,
    lin: &Linearization,
) -> SensitivityMatrix {
    let t = point.step;
    let n = unc.len();
    let n_v = model.bus_phases().len();
    let rows = line_rows(model);
    let n_s = model.solar_ders().count();
    let s0 = line_powers(model, &point.state);
    let mut voltage = DMatrix::zeros(n_v, n);
    let mut line = DMatrix::zeros(rows.len(), n);
    let mut line_im = DMatrix::zeros(rows.len(), n);
    let mut solar = DMatrix::zeros(n_s, n);
    for (j, inj) in unc.injections.iter().enumerate() {
        let dir = unc.direction(series, j, t);
        let dv = lin.voltage_response(model, inj.bus, inj.phase, dir);
        for (r, g) in lin.squared_voltage(model, &dv).into_iter().enumerate() {
            voltage[(r, j)] = g;
        }
        for (r, ds) in lin.line_power(model, &dv).into_iter().enumerate() {
            let mag = s0[r].norm();
            if mag > 0.0 {
                line[(r, j)] = (s0[r].conj() * ds).re / mag;
            } else {
                line[(r, j)] = ds.re;
                line_im[(r, j)] = ds.im;
            }
        }
        if inj.quantity == Quantity::Solar {
            if let Some(r) = solar_row(model, inj.bus, inj.phase) {
                let d = model.solar_ders().nth(r).expect("row").0;
                let s = point.setpoints[d].solar;
                solar[(r, j)] = if s.norm() > 0.0 { s.re / s.norm() } else { 1.0 };
            }
        }
    }
    let line_alt = (0..rows.len())
        .map(|r| (s0[r].norm() == 0.0).then(|| line_im.row(r).iter().copied().collect()))
        .collect();
    SensitivityMatrix {
        step: t,
        voltage,
        line,
        line_alt,
        solar,
    }
}

/// Central differences of the load flow, step `h` along each injection's
/// error direction.
pub fn finite_difference_sensitivities(
    model: &FeederModel,
    series: &TimeSeries,
    point: &FeasibleOperatingPoint,
    unc: &UncertaintyModel,
    h: f64,
) -> Result<SensitivityMatrix> {
    let t = point.step;
    let n = unc.len();
    let opts = LoadFlowOptions {
        tolerance: 1e-13,
        mismatch_tolerance: 1e-11,
        max_sweeps: 500,
        ..LoadFlowOptions::default()
    };
    let eval = |j: usize, sign: f64| -> Result<(Vec<f64>, Vec<C64>, Vec<f64>)> {
        let inj = &unc.injections[j];
        let mut sp = point.setpoints.clone();
        let mut set = InjectionSet::compose(model, series, t, &sp);
        let solar_der = model.solar_at(inj.bus, inj.phase);
        match (inj.quantity, solar_der) {
            (Quantity::Solar, Some(d)) => {
                sp[d].solar.re += sign * h;
                set = InjectionSet::compose(model, series, t, &sp);
            }
            _ => set.add(inj.bus, inj.phase, unc.direction(series, j, t) * (sign * h)),
        }
        let st = solve_loadflow_with(model, &set, &model.slack_voltage, opts)?;
        let w = squared_voltages(model, &st);
        let l = line_powers(model, &st);
        let s = model.solar_ders().map(|(d, _, _)| sp[d].solar.norm()).collect();
        Ok((w, l, s))
    };
    let rows = line_rows(model);
    let mut voltage = DMatrix::zeros(model.bus_phases().len(), n);
    let mut line = DMatrix::zeros(rows.len(), n);
    let mut line_im = DMatrix::zeros(rows.len(), n);
    let mut solar = DMatrix::zeros(model.solar_ders().count(), n);
    let s0 = line_powers(model, &point.state);
    for j in 0..n {
        let (wp, lp, sp) = eval(j, 1.0)?;
        let (wm, lm, sm) = eval(j, -1.0)?;
        for r in 0..wp.len() {
            voltage[(r, j)] = (wp[r] - wm[r]) / (2.0 * h);
        }
        for r in 0..lp.len() {
            if s0[r].norm() > 0.0 {
                line[(r, j)] = (lp[r].norm() - lm[r].norm()) / (2.0 * h);
            } else {
                let d = (lp[r] - lm[r]) / (2.0 * h);
                line[(r, j)] = d.re;
                line_im[(r, j)] = d.im;
            }
        }
        for r in 0..sp.len() {
            solar[(r, j)] = (sp[r] - sm[r]) / (2.0 * h);
        }
    }
    let line_alt = (0..rows.len())
        .map(|r| (s0[r].norm() == 0.0).then(|| line_im.row(r).iter().copied().collect()))
        .collect();
    Ok(SensitivityMatrix {
        step: t,
        voltage,
        line,
        line_alt,
        solar,
    })
}

/// `factor * ||g Sigma^{1/2}||_2`
pub fn uncertainty_margin(row: &[f64], sigma: &DMatrix<f64>, factor: f64) -> f64 {
    let g = DVector::from_column_slice(row);
    let q = g.dot(&(sigma * &g));
    factor * q.max(0.0).sqrt()
}

/// Tightened bounds for a horizon anchored at closed-loop step `t0`.
/// Horizon step `k` uses the operating point `trajectory[k]` and the
/// covariance of a forecast of lead `refresh_lead(t0) + k`.
pub fn tighten(
    model: &FeederModel,
    series: &TimeSeries,
    trajectory: &[FeasibleOperatingPoint],
    unc: &UncertaintyModel,
    cfg: &RobustConfig,
    t0: usize,
) -> Result<TightenedBounds> {
    cfg.validate()?;
    let f_v = safety_factor(cfg.distribution, cfg.alpha_v)?;
    let f_l = safety_factor(cfg.distribution, cfg.alpha_l)?;
    let f_s = safety_factor(cfg.distribution, cfg.alpha_s)?;
    let steps: Result<Vec<StepBounds>> = trajectory
        .par_iter()
        .enumerate()
        .map(|(k, point)| {
            let mut bounds = StepBounds::untightened(model);
            let lead = unc.refresh_lead(t0) + k;
            let sigma = unc.covariance_at(series, k, lead);
            if sigma.iter().all(|&v| v == 0.0) {
                return Ok(bounds);
            }
            let sens = compute_sensitivities(model, series, point, unc).map_err(|e| e.at_step(k))?;
            if cfg.tighten_voltage {
                for (r, b) in bounds.voltage.iter_mut().enumerate() {
                    let row: Vec<f64> = sens.voltage.row(r).iter().copied().collect();
                    let lam = uncertainty_margin(&row, &sigma, f_v);
                    b.upper -= lam;
                    b.lower += lam;
                    b.margin = lam;
                }
            }
            if cfg.tighten_lines {
                for (r, b) in bounds.line.iter_mut().enumerate() {
                    let row: Vec<f64> = sens.line.row(r).iter().copied().collect();
                    let mut lam = uncertainty_margin(&row, &sigma, f_l);
                    if let Some(alt) = &sens.line_alt[r] {
                        let im = uncertainty_margin(alt, &sigma, f_l);
                        lam = lam.hypot(im);
                    }
                    b.upper -= lam;
                    b.margin = lam;
                }
            }
            if cfg.tighten_solar {
                for (r, b) in bounds.solar.iter_mut().enumerate() {
                    let row: Vec<f64> = sens.solar.row(r).iter().copied().collect();
                    let lam = uncertainty_margin(&row, &sigma, f_s);
                    b.upper -= lam;
                    b.margin = lam;
                }
            }
            Ok(bounds)
        })
        .collect();
    let bounds = TightenedBounds { steps: steps? };
    let crossed = bounds.over_tight_steps();
    if !crossed.is_empty() {
        log::warn!("bounds over-tight at horizon steps {crossed:?}; slacks absorb the excess");
    }
    Ok(bounds)
}

/// Columnar rows `step,horizon_step,lead,element,phase,family,lower,upper,lambda`
/// for one tightened horizon.
pub fn write_bounds_rows<W: Write>(
    out: &mut W,
    model: &FeederModel,
    bounds: &TightenedBounds,
    step: usize,
    lead0: usize,
) -> std::io::Result<()> {
    let vrows = model.bus_phases();
    let lrows = line_rows(model);
    let srows: Vec<_> = model.solar_ders().map(|(_, d, _)| d).collect();
    for (k, sb) in bounds.steps.iter().enumerate() {
        let lead = lead0 + k;
        for (r, b) in sb.voltage.iter().enumerate() {
            let (bus, p) = vrows[r];
            writeln!(
                out,
                "{step},{k},{lead},{},{p},voltage,{},{},{}",
                model.buses[bus].id, b.lower, b.upper, b.margin
            )?;
        }
        for (r, b) in sb.line.iter().enumerate() {
            let (l, a) = lrows[r];
            let br = &model.branches[l];
            let p = br.phases.iter().nth(a).expect("position");
            writeln!(out, "{step},{k},{lead},{},{p},line,,{},{}", br.id, b.upper, b.margin)?;
        }
        for (r, b) in sb.solar.iter().enumerate() {
            let d = srows[r];
            writeln!(out, "{step},{k},{lead},{},{},solar,,{},{}", d.id, d.phase, b.upper, b.margin)?;
        }
    }
    Ok(())
}

pub const BOUNDS_HEADER: &str = "step,horizon_step,lead,element,phase,family,lower,upper,lambda";

/// Writes a standalone bounds file.
pub fn save_bounds(path: impl AsRef<Path>, model: &FeederModel, bounds: &TightenedBounds, lead0: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "# format_version={}", crate::FORMAT_VERSION)?;
    writeln!(f, "{BOUNDS_HEADER}")?;
    write_bounds_rows(&mut f, model, bounds, 0, lead0)?;
    f.flush()?;
    Ok(())
}
