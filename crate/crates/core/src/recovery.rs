//! Per-step AC-feasibility recovery with battery active powers held fixed.
//!
//! Sequential linearization anchored on exact load flows: every iterate is
//! a load-flow solution, so the returned state is rank-1 by construction.
//! Each iteration linearizes voltages and line flows around the current
//! point, takes a convex step over the reactive and solar set-points within
//! a box trust region, and accepts it only if the exact penalized loss
//! `losses + gamma * slacks` does not increase.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{StepBounds, TightenedBounds};
use crate::conic::{ConicProgram, ConicSettings, LinExpr};
use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::linalg::C64;
use crate::linearize::{line_powers, squared_voltages, Linearization};
use crate::loadflow::{compute_losses, rank1_gap, solve_loadflow_with, DerSetpoint, InjectionSet, LoadFlowOptions, NetworkState};
use crate::series::TimeSeries;
use crate::socp::{SocpSolution, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryOptions {
    pub initial_radius: f64,
    pub step_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            initial_radius: 0.05,
            step_tolerance: 1e-7,
            max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ControlKind {
    BatteryQ,
    SolarP,
    SolarQ,
}

#[derive(Debug, Clone, Copy)]
struct Control {
    der: usize,
    kind: ControlKind,
}

impl Control {
    fn direction(&self) -> C64 {
        match self.kind {
            ControlKind::SolarP => C64::new(1.0, 0.0),
            ControlKind::BatteryQ | ControlKind::SolarQ => C64::new(0.0, 1.0),
        }
    }

    fn get(&self, sp: &[DerSetpoint]) -> f64 {
        let s = &sp[self.der];
        match self.kind {
            ControlKind::BatteryQ => s.q_battery,
            ControlKind::SolarP => s.solar.re,
            ControlKind::SolarQ => s.solar.im,
        }
    }

    fn set(&self, sp: &mut [DerSetpoint], value: f64) {
        let s = &mut sp[self.der];
        match self.kind {
            ControlKind::BatteryQ => s.q_battery = value,
            ControlKind::SolarP => s.solar.re = value,
            ControlKind::SolarQ => s.solar.im = value,
        }
    }
}

/// AC-exact operating point of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleOperatingPoint {
    pub step: usize,
    pub setpoints: Vec<DerSetpoint>,
    pub state: NetworkState,
    pub losses: f64,
    /// `gamma` times the total of all slacks.
    pub slack_term: f64,
    /// `(V+, V-)` per voltage row.
    pub voltage_slack: Vec<(f64, f64)>,
    pub line_slack: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub rank1_gap: f64,
}

impl FeasibleOperatingPoint {
    pub fn objective(&self) -> f64 {
        self.losses + self.slack_term
    }

    pub fn slack_total(&self) -> f64 {
        self.voltage_slack.iter().map(|(u, d)| u + d).sum::<f64>() + self.line_slack.iter().sum::<f64>()
    }

    pub fn diagnostics(&self) -> RecoveryDiagnostics {
        RecoveryDiagnostics {
            step: self.step,
            iterations: self.iterations,
            converged: self.converged,
            rank1_gap: self.rank1_gap,
            losses: self.losses,
            slack_total: self.slack_total(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryDiagnostics {
    pub step: usize,
    pub iterations: usize,
    pub converged: bool,
    pub rank1_gap: f64,
    pub losses: f64,
    pub slack_total: f64,
}

struct Evaluated {
    state: NetworkState,
    losses: f64,
    voltage_slack: Vec<(f64, f64)>,
    line_slack: Vec<f64>,
    merit: f64,
}

struct StepContext<'a> {
    model: &'a FeederModel,
    series: &'a TimeSeries,
    t: usize,
    bounds: &'a StepBounds,
    gamma: f64,
    lf: LoadFlowOptions,
}

impl StepContext<'_> {
    fn evaluate(&self, sp: &[DerSetpoint]) -> Result<Evaluated> {
        let inj = InjectionSet::compose(self.model, self.series, self.t, sp);
        let state = solve_loadflow_with(self.model, &inj, &self.model.slack_voltage, self.lf)?;
        let losses = compute_losses(self.model, &state.lifted(self.model));
        let w = squared_voltages(self.model, &state);
        let voltage_slack: Vec<(f64, f64)> = w
            .iter()
            .zip(&self.bounds.voltage)
            .map(|(&w, b)| ((w - b.upper).max(0.0), (b.lower - w).max(0.0)))
            .collect();
        let line_slack: Vec<f64> = line_powers(self.model, &state)
            .iter()
            .zip(&self.bounds.line)
            .map(|(s, b)| (s.norm() - b.upper.max(0.0)).max(0.0))
            .collect();
        let slack: f64 = voltage_slack.iter().map(|(u, d)| u + d).sum::<f64>() + line_slack.iter().sum::<f64>();
        Ok(Evaluated {
            state,
            losses,
            voltage_slack,
            line_slack,
            merit: losses + self.gamma * slack,
        })
    }

    fn loss_gradient(&self, lin: &Linearization, controls: &[Control]) -> Vec<f64> {
        controls
            .iter()
            .map(|c| {
                let der = &self.model.ders[c.der];
                let ds = c.direction();
                let dv = lin.voltage_response(self.model, der.bus, der.phase, ds);
                lin.slack_power(self.model, &dv).re + ds.re
            })
            .collect()
    }
}

/// Recovers step `t` of `socp` against `bounds.steps[t]`.
pub fn recover(
    model: &FeederModel,
    series: &TimeSeries,
    socp: &SocpSolution,
    t: usize,
    bounds: &TightenedBounds,
    cfg: &SolverConfig,
) -> Result<FeasibleOperatingPoint> {
    recover_with(model, series, socp, t, bounds, cfg, &RecoveryOptions::default())
}

pub fn recover_with(
    model: &FeederModel,
    series: &TimeSeries,
    socp: &SocpSolution,
    t: usize,
    bounds: &TightenedBounds,
    cfg: &SolverConfig,
    opts: &RecoveryOptions,
) -> Result<FeasibleOperatingPoint> {
    if t >= socp.schedule.steps() || t >= bounds.horizon() || t >= series.steps() {
        return Err(Error::Dimension(format!("step {t} outside the horizon")));
    }
    let ctx = StepContext {
        model,
        series,
        t,
        bounds: &bounds.steps[t],
        gamma: cfg.slack_penalty,
        lf: LoadFlowOptions::default(),
    };
    recover_step(&ctx, &socp.schedule.setpoints[t], cfg, opts).map_err(|e| e.at_step(t))
}

fn recover_step(
    ctx: &StepContext,
    planned: &[DerSetpoint],
    cfg: &SolverConfig,
    opts: &RecoveryOptions,
) -> Result<FeasibleOperatingPoint> {
    let model = ctx.model;
    let mut controls = Vec::new();
    for (d, der) in model.ders.iter().enumerate() {
        if der.battery.is_some() {
            controls.push(Control { der: d, kind: ControlKind::BatteryQ });
        }
        if der.solar.is_some() {
            controls.push(Control { der: d, kind: ControlKind::SolarP });
            controls.push(Control { der: d, kind: ControlKind::SolarQ });
        }
    }

    let mut sp = project_devices(ctx, planned);
    let mut cur = ctx.evaluate(&sp)?;
    let mut radius = opts.initial_radius;
    let mut iterations = 0;
    let mut converged = controls.is_empty();
    let mut solves = 0;

    while !converged && solves < opts.max_iterations {
        solves += 1;
        let lin = Linearization::new(model, &cur.state)?;
        let grad = ctx.loss_gradient(&lin, &controls);
        let hess = loss_hessian(ctx, &sp, &controls, &grad)?;
        let Some(step) = step_program(ctx, &lin, &cur, &sp, &controls, &grad, &hess, radius, cfg)? else {
            log::debug!("step {}: recovery step program unsolved", ctx.t);
            break;
        };
        let norm = step.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if norm < opts.step_tolerance {
            converged = true;
            break;
        }
        let mut trial = sp.clone();
        for (c, d) in controls.iter().zip(&step) {
            c.set(&mut trial, c.get(&sp) + d);
        }
        match ctx.evaluate(&trial) {
            Ok(next) if next.merit <= cur.merit + 1e-14 * cur.merit.abs() => {
                sp = trial;
                cur = next;
                iterations += 1;
            }
            _ => {
                radius *= 0.5;
                if radius < opts.step_tolerance {
                    converged = true;
                }
            }
        }
    }

    let gap = rank1_gap(model, &cur.state.lifted(model));
    Ok(FeasibleOperatingPoint {
        step: ctx.t,
        setpoints: sp,
        losses: cur.losses,
        slack_term: cur.merit - cur.losses,
        voltage_slack: cur.voltage_slack,
        line_slack: cur.line_slack,
        state: cur.state,
        iterations,
        converged,
        rank1_gap: gap,
    })
}

/// Planned set-points moved onto the device limits; active battery powers
/// are copied untouched.
fn project_devices(ctx: &StepContext, planned: &[DerSetpoint]) -> Vec<DerSetpoint> {
    let mut sp = planned.to_vec();
    let mut solar_row = 0;
    for (d, der) in ctx.model.ders.iter().enumerate() {
        if let Some(bat) = &der.battery {
            let net = sp[d].p_discharge - sp[d].p_charge;
            let q_max = (bat.h_max * bat.h_max - net * net).max(0.0).sqrt();
            sp[d].q_battery = sp[d].q_battery.clamp(-q_max, q_max);
        }
        if der.solar.is_some() {
            let avail = ctx.series.solar(der.bus, der.phase, ctx.t);
            let cap = ctx.bounds.solar[solar_row].upper.max(0.0);
            solar_row += 1;
            let mut s = sp[d].solar;
            s.re = s.re.clamp(0.0, avail.max(0.0));
            if s.norm() > cap {
                s *= cap / s.norm();
            }
            sp[d].solar = s;
        }
    }
    sp
}

/// Loss Hessian by forward differences of the analytic gradient,
/// symmetrized and projected onto the PSD cone.
fn loss_hessian(ctx: &StepContext, sp: &[DerSetpoint], controls: &[Control], grad: &[f64]) -> Result<DMatrix<f64>> {
    let n = controls.len();
    let h = 1e-5;
    let mut hess = DMatrix::zeros(n, n);
    for (j, c) in controls.iter().enumerate() {
        let mut shifted = sp.to_vec();
        c.set(&mut shifted, c.get(sp) + h);
        let ev = ctx.evaluate(&shifted)?;
        let lin = Linearization::new(ctx.model, &ev.state)?;
        let g = ctx.loss_gradient(&lin, controls);
        for i in 0..n {
            hess[(i, j)] = (g[i] - grad[i]) / h;
        }
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

#[allow(clippy::too_many_arguments)]
fn step_program(
    ctx: &StepContext,
    lin: &Linearization,
    cur: &Evaluated,
    sp: &[DerSetpoint],
    controls: &[Control],
    grad: &[f64],
    hess: &DMatrix<f64>,
    radius: f64,
    cfg: &SolverConfig,
) -> Result<Option<Vec<f64>>> {
    let model = ctx.model;
    let mut prog = ConicProgram::new();
    let dx: Vec<_> = (0..controls.len()).map(|j| prog.add_var(format!("d{j}"))).collect();
    let mut objective = LinExpr::default();
    for (j, &v) in dx.iter().enumerate() {
        objective.add_term(v, grad[j]);
        prog.add_le(LinExpr::var(v), LinExpr::constant(radius));
        prog.add_le(LinExpr::constant(-radius), LinExpr::var(v));
        for i in 0..=j {
            if hess[(i, j)] != 0.0 {
                prog.add_quadratic(dx[i], v, hess[(i, j)]);
            }
        }
    }

    // linear responses of each row to each control
    let mut dw = vec![vec![0.0; controls.len()]; ctx.bounds.voltage.len()];
    let mut ds = vec![vec![C64::default(); controls.len()]; ctx.bounds.line.len()];
    for (j, c) in controls.iter().enumerate() {
        let der = &model.ders[c.der];
        let dv = lin.voltage_response(model, der.bus, der.phase, c.direction());
        for (r, g) in lin.squared_voltage(model, &dv).into_iter().enumerate() {
            dw[r][j] = g;
        }
        for (r, g) in lin.line_power(model, &dv).into_iter().enumerate() {
            ds[r][j] = g;
        }
    }

    let w = squared_voltages(model, &cur.state);
    for (r, b) in ctx.bounds.voltage.iter().enumerate() {
        let mut expr = LinExpr::constant(w[r]);
        for (j, &v) in dx.iter().enumerate() {
            expr.add_term(v, dw[r][j]);
        }
        if cfg.voltage_slacks {
            let up = prog.add_var_lb(format!("vp{r}"), 0.0);
            let dn = prog.add_var_lb(format!("vm{r}"), 0.0);
            objective.add_term(up, cfg.slack_penalty);
            objective.add_term(dn, cfg.slack_penalty);
            prog.add_le(expr.clone(), LinExpr::constant(b.upper) + LinExpr::var(up));
            prog.add_le(LinExpr::constant(b.lower) - LinExpr::var(dn), expr);
        } else {
            prog.add_le(expr.clone(), LinExpr::constant(b.upper));
            prog.add_le(LinExpr::constant(b.lower), expr);
        }
    }

    let s = line_powers(model, &cur.state);
    for (r, b) in ctx.bounds.line.iter().enumerate() {
        let mag = s[r].norm();
        let mut expr = LinExpr::constant(mag);
        if mag > 0.0 {
            for (j, &v) in dx.iter().enumerate() {
                expr.add_term(v, (s[r].conj() * ds[r][j]).re / mag);
            }
        }
        let slack = prog.add_var_lb(format!("lp{r}"), 0.0);
        objective.add_term(slack, cfg.slack_penalty);
        prog.add_le(expr, LinExpr::constant(b.upper.max(0.0)) + LinExpr::var(slack));
    }

    // device limits, exact
    let find = |der: usize, kind: ControlKind| {
        controls
            .iter()
            .position(|c| c.der == der && c.kind == kind)
            .map(|j| dx[j])
    };
    let mut solar_row = 0;
    for (d, der) in model.ders.iter().enumerate() {
        if let Some(bat) = &der.battery {
            let q = find(d, ControlKind::BatteryQ).expect("battery control");
            let net = sp[d].p_discharge - sp[d].p_charge;
            prog.add_soc(
                LinExpr::constant(bat.h_max),
                vec![LinExpr::constant(net), LinExpr::constant(sp[d].q_battery) + LinExpr::var(q)],
            );
        }
        if der.solar.is_some() {
            let p = find(d, ControlKind::SolarP).expect("solar control");
            let q = find(d, ControlKind::SolarQ).expect("solar control");
            let avail = ctx.series.solar(der.bus, der.phase, ctx.t).max(0.0);
            let ps = LinExpr::constant(sp[d].solar.re) + LinExpr::var(p);
            let qs = LinExpr::constant(sp[d].solar.im) + LinExpr::var(q);
            prog.add_nonneg(ps.clone());
            prog.add_le(ps.clone(), LinExpr::constant(avail));
            let cap = ctx.bounds.solar[solar_row].upper.max(0.0);
            solar_row += 1;
            prog.add_soc(LinExpr::constant(cap), vec![ps, qs]);
        }
    }

    prog.objective = objective;
    let settings = ConicSettings {
        tolerance: cfg.tolerance.max(1e-10),
        time_limit_s: cfg.time_limit_s,
        ..ConicSettings::default()
    };
    let sol = prog.solve(&settings)?;
    if !sol.status.is_solved() {
        return Ok(None);
    }
    Ok(Some(dx.iter().map(|&v| sol.x[v]).collect()))
}

/// Recovers every step of the horizon; steps run concurrently and the
/// result does not depend on their order.
pub fn recover_all(
    model: &FeederModel,
    series: &TimeSeries,
    socp: &SocpSolution,
    bounds: &TightenedBounds,
    cfg: &SolverConfig,
) -> Result<Vec<FeasibleOperatingPoint>> {
    (0..socp.schedule.steps())
        .into_par_iter()
        .map(|t| recover(model, series, socp, t, bounds, cfg))
        .collect()
}

/// Sequential variant of [`recover_all`].
pub fn recover_all_sequential(
    model: &FeederModel,
    series: &TimeSeries,
    socp: &SocpSolution,
    bounds: &TightenedBounds,
    cfg: &SolverConfig,
) -> Result<Vec<FeasibleOperatingPoint>> {
    (0..socp.schedule.steps())
        .map(|t| recover(model, series, socp, t, bounds, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::tests::{bus, line};
    use crate::feeder::{BatterySpec, DerSpec};
    use crate::linalg::c64;
    use crate::phase::Phase;
    use crate::socp::solve_program;

    fn model(with_battery: bool) -> FeederModel {
        let ders = if with_battery {
            vec![DerSpec {
                id: "b".into(),
                bus: 2,
                phase: Phase::A,
                battery: Some(BatterySpec {
                    p_max: 0.1,
                    h_max: 0.15,
                    b_min: 0.0,
                    b_max: 1.0,
                    b_init: 0.5,
                    eta_c: 0.95,
                    eta_d: 0.95,
                }),
                solar: None,
            }]
        } else {
            vec![]
        };
        FeederModel::new(
            "three",
            1.0,
            1.0,
            0,
            None,
            vec![bus("0", "a"), bus("1", "a"), bus("2", "a")],
            vec![
                line("l1", 0, 1, "a", (0.01, 0.02)),
                line("l2", 1, 2, "a", (0.02, 0.03)),
            ],
            ders,
        )
        .unwrap()
    }

    fn series(m: &FeederModel, steps: usize) -> TimeSeries {
        let mut s = TimeSeries::zeros(m.buses.len(), steps, 1.0 / 60.0);
        for t in 0..steps {
            s.set_demand(1, Phase::A, t, c64(0.2, 0.05));
            s.set_demand(2, Phase::A, t, c64(0.3 + 0.01 * t as f64, 0.1));
        }
        s
    }

    #[test]
    fn no_controls_is_fixed_point() {
        let m = model(false);
        let s = series(&m, 1);
        let b = TightenedBounds::untightened(&m, 1);
        let cfg = SolverConfig::default();
        let socp = solve_program(&m, &s, &b, &cfg, &[]).unwrap();
        let p = recover(&m, &s, &socp, 0, &b, &cfg).unwrap();
        assert_eq!(p.iterations, 0);
        assert!(p.converged);
        assert!((p.losses - socp.step_losses[0]).abs() < 1e-6);
    }

    #[test]
    fn battery_active_power_is_fixed() {
        let m = model(true);
        let s = series(&m, 3);
        let b = TightenedBounds::untightened(&m, 3);
        let cfg = SolverConfig::default();
        let socp = solve_program(&m, &s, &b, &cfg, &[0.5]).unwrap();
        let pts = recover_all(&m, &s, &socp, &b, &cfg).unwrap();
        let seq = recover_all_sequential(&m, &s, &socp, &b, &cfg).unwrap();
        assert_eq!(pts, seq);
        for (t, p) in pts.iter().enumerate() {
            let planned = socp.schedule.setpoints[t][0];
            assert_eq!(p.setpoints[0].p_charge.to_bits(), planned.p_charge.to_bits());
            assert_eq!(p.setpoints[0].p_discharge.to_bits(), planned.p_discharge.to_bits());
            assert!(p.rank1_gap < 1e-6);
            assert!(p.losses >= socp.step_losses[t] - 1e-6 * socp.step_losses[t].max(1.0));
            assert!(p.converged);
        }
    }

    #[test]
    fn low_upper_limit_uses_slack_and_absorbs() {
        let m = model(true);
        let mut s = series(&m, 1);
        // export at the far bus raises its voltage
        s.set_demand(2, Phase::A, 0, c64(-0.6, 0.0));
        let mut b = TightenedBounds::untightened(&m, 1);
        for v in &mut b.steps[0].voltage {
            v.upper = 1.0;
        }
        let cfg = SolverConfig::default();
        let socp = solve_program(&m, &s, &b, &cfg, &[0.5]).unwrap();
        let p = recover(&m, &s, &socp, 0, &b, &cfg).unwrap();
        assert!(p.voltage_slack[1].0 > 0.0);
        let sp = p.setpoints[0];
        let net = sp.p_discharge - sp.p_charge;
        let q_lim = (0.15f64 * 0.15 - net * net).sqrt();
        assert!((sp.q_battery + q_lim).abs() < 1e-6, "q {} limit {q_lim}", sp.q_battery);
    }
}
