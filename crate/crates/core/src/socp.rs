//! Multi-period second-order cone relaxation of the unbalanced branch flow
//! model with battery and solar inverter dispatch.
//!
//! Hermitian blocks `W` (per non-slack bus) and `I` (per branch) are
//! realified into `k` diagonal variables plus `k(k-1)/2` real and imaginary
//! off-diagonal pairs; the sending-end power `S` (per branch) is a full
//! complex block with `2k^2` variables. Per step the program carries
//!
//! ```text
//!   sum_n k_n^2 + sum_l 3 k_l^2         lifted network variables
//! + 3 per battery (P^d, P^c, q^b) + 1   SoC at the end of the step
//! + 2 per solar inverter (P^s, Q^s)
//! + 2 per non-slack bus phase           voltage slacks (when enabled)
//! ```
//!
//! The slack bus `W` is the constant `V0 V0^H`.

use serde::{Deserialize, Serialize};

use crate::bounds::{line_rows, StepBounds, TightenedBounds};
use crate::conic::{ConicProgram, ConicSettings, ConicSolution, ConicStatus, LinExpr, Var};
use crate::error::{Error, Result};
use crate::feeder::{BatterySpec, FeederModel};
use crate::linalg::{outer, C64, CMat};
use crate::loadflow::{compute_losses, rank1_gap, DerSetpoint, LiftedState};
use crate::series::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Weight of the simultaneous charge/discharge penalty.
    pub scd_penalty: f64,
    /// Weight of the voltage slack variables.
    pub slack_penalty: f64,
    /// Terminal SoC equal to the initial SoC.
    pub enforce_soc_sustainability: bool,
    /// Voltage slacks present; without them tightened voltage limits are hard.
    pub voltage_slacks: bool,
    pub tolerance: f64,
    pub time_limit_s: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            scd_penalty: 1e-3,
            slack_penalty: 1e3,
            enforce_soc_sustainability: false,
            voltage_slacks: true,
            tolerance: 1e-12,
            time_limit_s: 120.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scd_penalty >= 0.0 && self.slack_penalty >= 0.0) {
            return Err(Error::Config("penalties must be nonnegative".into()));
        }
        if !(self.tolerance > 0.0 && self.time_limit_s > 0.0) {
            return Err(Error::Config("tolerance and time limit must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn conic_settings(&self) -> ConicSettings {
        ConicSettings {
            tolerance: self.tolerance,
            time_limit_s: self.time_limit_s,
            ..ConicSettings::default()
        }
    }
}

/// B_{t+1} = B_t + eta_c P^c dt - (P^d / eta_d) dt
pub fn soc_update(soc: f64, p_charge: f64, p_discharge: f64, spec: &BatterySpec, dt_hours: f64) -> f64 {
    soc + spec.eta_c * p_charge * dt_hours - p_discharge / spec.eta_d * dt_hours
}

/// Constraint families, used to report which relaxation restores
/// feasibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    VoltageLimits,
    LineLimits,
    SolarLimits,
    SocLimits,
    Sustainability,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::VoltageLimits,
        Family::LineLimits,
        Family::SolarLimits,
        Family::SocLimits,
        Family::Sustainability,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::VoltageLimits => "voltage limits",
            Family::LineLimits => "line limits",
            Family::SolarLimits => "solar inverter limits",
            Family::SocLimits => "battery SoC limits",
            Family::Sustainability => "SoC sustainability",
        }
    }
}

/// Complex block of affine expressions, row-major `k x k`.
#[derive(Debug, Clone)]
struct Block {
    k: usize,
    re: Vec<LinExpr>,
    im: Vec<LinExpr>,
}

impl Block {
    fn constant(m: &CMat) -> Self {
        let k = m.nrows();
        let mut re = Vec::with_capacity(k * k);
        let mut im = Vec::with_capacity(k * k);
        for a in 0..k {
            for b in 0..k {
                re.push(LinExpr::constant(m[(a, b)].re));
                im.push(LinExpr::constant(m[(a, b)].im));
            }
        }
        Block { k, re, im }
    }

    fn hermitian(prog: &mut ConicProgram, k: usize, name: &str) -> (Self, HermVars) {
        let mut re = vec![LinExpr::default(); k * k];
        let mut im = vec![LinExpr::default(); k * k];
        let mut vars = HermVars::default();
        for a in 0..k {
            let d = prog.add_var(format!("{name}[{a}{a}]"));
            vars.diag.push(d);
            re[a * k + a] = LinExpr::var(d);
        }
        for a in 0..k {
            for b in a + 1..k {
                let r = prog.add_var(format!("{name}.re[{a}{b}]"));
                let i = prog.add_var(format!("{name}.im[{a}{b}]"));
                vars.off.push((a, b, r, i));
                re[a * k + b] = LinExpr::var(r);
                re[b * k + a] = LinExpr::var(r);
                im[a * k + b] = LinExpr::var(i);
                im[b * k + a] = LinExpr::term(i, -1.0);
            }
        }
        (Block { k, re, im }, vars)
    }

    fn general(prog: &mut ConicProgram, k: usize, name: &str) -> (Self, Vec<(Var, Var)>) {
        let mut re = Vec::with_capacity(k * k);
        let mut im = Vec::with_capacity(k * k);
        let mut vars = Vec::with_capacity(k * k);
        for a in 0..k {
            for b in 0..k {
                let r = prog.add_var(format!("{name}.re[{a}{b}]"));
                let i = prog.add_var(format!("{name}.im[{a}{b}]"));
                vars.push((r, i));
                re.push(LinExpr::var(r));
                im.push(LinExpr::var(i));
            }
        }
        (Block { k, re, im }, vars)
    }

    fn re(&self, a: usize, b: usize) -> &LinExpr {
        &self.re[a * self.k + b]
    }

    fn im(&self, a: usize, b: usize) -> &LinExpr {
        &self.im[a * self.k + b]
    }
}

/// `z * (re + j im)` for a constant `z`, optionally conjugating the
/// expression first.
fn cmul(z: C64, re: &LinExpr, im: &LinExpr, conj_expr: bool) -> (LinExpr, LinExpr) {
    let s = if conj_expr { -1.0 } else { 1.0 };
    let out_re = re.clone() * z.re + im.clone() * (-z.im * s);
    let out_im = im.clone() * (z.re * s) + re.clone() * z.im;
    (out_re, out_im)
}

#[derive(Debug, Clone, Default)]
struct HermVars {
    diag: Vec<Var>,
    off: Vec<(usize, usize, Var, Var)>,
}

#[derive(Debug, Clone, Default)]
struct StepVars {
    w: Vec<Option<HermVars>>,
    i: Vec<HermVars>,
    s: Vec<Vec<(Var, Var)>>,
    /// Per DER: (P^d, P^c, q^b, B_{t+1}) for batteries.
    battery: Vec<Option<[Var; 4]>>,
    /// Per DER: (P^s, Q^s) for solar inverters.
    solar: Vec<Option<[Var; 2]>>,
    /// Per voltage row: (V+, V-).
    slack: Vec<Option<(Var, Var)>>,
}

/// Standard-form program plus the map back to dispatch variables.
#[derive(Debug, Clone)]
pub struct SocpProgram {
    pub program: ConicProgram,
    steps: Vec<StepVars>,
    horizon: usize,
    dt_hours: f64,
    loss_terms: Vec<LinExpr>,
}

impl SocpProgram {
    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

pub fn build_program(
    model: &FeederModel,
    series: &TimeSeries,
    bounds: &TightenedBounds,
    cfg: &SolverConfig,
) -> Result<SocpProgram> {
    let soc0: Vec<f64> = model
        .ders
        .iter()
        .map(|d| d.battery.map(|b| b.b_init).unwrap_or(0.0))
        .collect();
    build_program_from(model, series, bounds, cfg, &soc0, None)
}

/// Builds the program starting from `soc0` (one entry per DER; ignored for
/// DERs without a battery). `relax` drops one constraint family.
pub fn build_program_from(
    model: &FeederModel,
    series: &TimeSeries,
    bounds: &TightenedBounds,
    cfg: &SolverConfig,
    soc0: &[f64],
    relax: Option<Family>,
) -> Result<SocpProgram> {
    cfg.validate()?;
    let horizon = series.steps();
    if horizon == 0 {
        return Err(Error::Dimension("empty horizon".into()));
    }
    if series.n_buses() != model.buses.len() {
        return Err(Error::Dimension(format!(
            "series covers {} buses, feeder has {}",
            series.n_buses(),
            model.buses.len()
        )));
    }
    if bounds.horizon() < horizon {
        return Err(Error::Dimension(format!(
            "bounds cover {} steps, horizon is {horizon}",
            bounds.horizon()
        )));
    }
    if soc0.len() != model.ders.len() {
        return Err(Error::Dimension(format!(
            "{} initial SoC values for {} DERs",
            soc0.len(),
            model.ders.len()
        )));
    }
    let n_volt = model.bus_phases().len();
    let n_line = line_rows(model).len();
    let n_solar = model.solar_ders().count();
    for (t, sb) in bounds.steps.iter().take(horizon).enumerate() {
        if sb.voltage.len() != n_volt || sb.line.len() != n_line || sb.solar.len() != n_solar {
            return Err(Error::Dimension(format!("bounds at step {t} do not match the feeder")));
        }
    }

    let mut prog = ConicProgram::new();
    let mut steps = Vec::with_capacity(horizon);
    let mut objective = LinExpr::default();
    let mut loss_terms = Vec::with_capacity(horizon);
    let mut soc_prev: Vec<LinExpr> = soc0.iter().map(|&b| LinExpr::constant(b)).collect();

    for t in 0..horizon {
        let (vars, losses, step_obj) =
            build_step(&mut prog, model, series, &bounds.steps[t], cfg, t, &mut soc_prev, relax);
        objective += &step_obj;
        loss_terms.push(losses);
        steps.push(vars);
    }

    if cfg.enforce_soc_sustainability && relax != Some(Family::Sustainability) {
        for (d, der) in model.ders.iter().enumerate() {
            if der.battery.is_some() {
                prog.add_eq(soc_prev[d].clone() - LinExpr::constant(soc0[d]));
            }
        }
    }

    prog.objective = objective;
    Ok(SocpProgram {
        program: prog,
        steps,
        horizon,
        dt_hours: series.dt_hours,
        loss_terms,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_step(
    prog: &mut ConicProgram,
    model: &FeederModel,
    series: &TimeSeries,
    bounds: &StepBounds,
    cfg: &SolverConfig,
    t: usize,
    soc_prev: &mut [LinExpr],
    relax: Option<Family>,
) -> (StepVars, LinExpr, LinExpr) {
    let topo = model.topology();
    let slack = model.slack_bus;
    let mut vars = StepVars::default();

    // lifted network variables
    let mut w_blocks = Vec::with_capacity(model.buses.len());
    for (n, bus) in model.buses.iter().enumerate() {
        if n == slack {
            let w0 = outer(&model.slack_voltage, &model.slack_voltage);
            w_blocks.push(Block::constant(&w0));
            vars.w.push(None);
        } else {
            let (block, hv) = Block::hermitian(prog, bus.phases.len(), &format!("W{t}.{}", bus.id));
            w_blocks.push(block);
            vars.w.push(Some(hv));
        }
    }
    let mut i_blocks = Vec::with_capacity(model.branches.len());
    let mut s_blocks = Vec::with_capacity(model.branches.len());
    for br in &model.branches {
        let k = br.phases.len();
        let (ib, iv) = Block::hermitian(prog, k, &format!("I{t}.{}", br.id));
        let (sb, sv) = Block::general(prog, k, &format!("S{t}.{}", br.id));
        i_blocks.push(ib);
        s_blocks.push(sb);
        vars.i.push(iv);
        vars.s.push(sv);
    }

    // DER variables and nodal net injection expressions
    let mut injection: Vec<Vec<(LinExpr, LinExpr)>> = model
        .buses
        .iter()
        .enumerate()
        .map(|(b, bus)| {
            bus.phases
                .iter()
                .map(|p| {
                    let mut s = -series.demand(b, p, t);
                    if model.solar_at(b, p).is_none() {
                        s += series.solar(b, p, t);
                    }
                    (LinExpr::constant(s.re), LinExpr::constant(s.im))
                })
                .collect()
        })
        .collect();

    let mut step_obj = LinExpr::default();
    for (d, der) in model.ders.iter().enumerate() {
        let k = model.buses[der.bus]
            .phases
            .position(der.phase)
            .expect("validated DER phase");
        if let Some(bat) = &der.battery {
            let pd = prog.add_var_lb(format!("Pd{t}.{}", der.id), 0.0);
            let pc = prog.add_var_lb(format!("Pc{t}.{}", der.id), 0.0);
            let qb = prog.add_var(format!("qb{t}.{}", der.id));
            let soc = prog.add_var(format!("B{}.{}", t + 1, der.id));
            prog.add_le(LinExpr::var(pd), LinExpr::constant(bat.p_max));
            prog.add_le(LinExpr::var(pc), LinExpr::constant(bat.p_max));
            prog.add_soc(
                LinExpr::constant(bat.h_max),
                vec![LinExpr::var(pd) - LinExpr::var(pc), LinExpr::var(qb)],
            );
            // B_{t+1} - B_t - eta_c Pc dt + Pd/eta_d dt = 0
            let dt = series.dt_hours;
            let mut dyn_eq = LinExpr::var(soc) - soc_prev[d].clone();
            dyn_eq.add_term(pc, -bat.eta_c * dt);
            dyn_eq.add_term(pd, dt / bat.eta_d);
            prog.add_eq(dyn_eq);
            if relax != Some(Family::SocLimits) {
                prog.add_le(LinExpr::constant(bat.b_min), LinExpr::var(soc));
                prog.add_le(LinExpr::var(soc), LinExpr::constant(bat.b_max));
            }
            soc_prev[d] = LinExpr::var(soc);
            step_obj.add_term(pd, cfg.scd_penalty * (1.0 / bat.eta_d - bat.eta_c));

            let (re, im) = &mut injection[der.bus][k];
            re.add_term(pd, 1.0);
            re.add_term(pc, -1.0);
            im.add_term(qb, 1.0);
            vars.battery.push(Some([pd, pc, qb, soc]));
        } else {
            vars.battery.push(None);
        }
        if der.solar.is_some() {
            let ps = prog.add_var_lb(format!("Ps{t}.{}", der.id), 0.0);
            let qs = prog.add_var(format!("Qs{t}.{}", der.id));
            prog.add_le(LinExpr::var(ps), LinExpr::constant(series.solar(der.bus, der.phase, t)));
            let (re, im) = &mut injection[der.bus][k];
            re.add_term(ps, 1.0);
            im.add_term(qs, 1.0);
            vars.solar.push(Some([ps, qs]));
        } else {
            vars.solar.push(None);
        }
    }

    // solar inverter limits
    if relax != Some(Family::SolarLimits) {
        for (row, (d, _, _)) in model.solar_ders().enumerate() {
            let [ps, qs] = vars.solar[d].expect("solar vars");
            let cap = bounds.solar[row].upper.max(0.0);
            prog.add_soc(LinExpr::constant(cap), vec![LinExpr::var(ps), LinExpr::var(qs)]);
        }
    }

    // 2x2 minor cones on W and I
    for (n, hv) in vars.w.iter().enumerate() {
        if hv.is_some() {
            minor_cones(prog, &w_blocks[n]);
        }
    }
    for ib in &i_blocks {
        minor_cones(prog, ib);
    }

    let mut losses = LinExpr::default();
    for (l, br) in model.branches.iter().enumerate() {
        let (up, down) = topo.oriented[l];
        let up_phases = model.buses[up].phases;
        let k = br.phases.len();
        let pos: Vec<usize> = br
            .phases
            .iter()
            .map(|p| up_phases.position(p).expect("subset"))
            .collect();
        let w_up = &w_blocks[up];
        let ib = &i_blocks[l];
        let sb = &s_blocks[l];

        // mixed W/I/S cones: W_up[a,a] I[b,b] >= |S[a,b]|^2
        for a in 0..k {
            for b in 0..k {
                let wa = w_up.re(pos[a], pos[a]).clone();
                let ib_ = ib.re(b, b).clone();
                prog.add_soc(
                    wa.clone() + ib_.clone(),
                    vec![sb.re(a, b).clone() * 2.0, sb.im(a, b).clone() * 2.0, wa - ib_],
                );
            }
        }

        // voltage drop: W_down = W_up - (S Z^H + Z S^H) + Z I Z^H
        let z = &br.z;
        let wd = &w_blocks[down];
        for a in 0..k {
            for b in a..k {
                let mut re = w_up.re(pos[a], pos[b]).clone() - wd.re(a, b).clone();
                let mut im = w_up.im(pos[a], pos[b]).clone() - wd.im(a, b).clone();
                for c in 0..k {
                    // - S[a,c] conj(Z[b,c])
                    let (r, i) = cmul(z[(b, c)].conj(), sb.re(a, c), sb.im(a, c), false);
                    re -= r;
                    im -= i;
                    // - Z[a,c] conj(S[b,c])
                    let (r, i) = cmul(z[(a, c)], sb.re(b, c), sb.im(b, c), true);
                    re -= r;
                    im -= i;
                    for e in 0..k {
                        // + Z[a,c] I[c,e] conj(Z[b,e])
                        let coef = z[(a, c)] * z[(b, e)].conj();
                        let (r, i) = cmul(coef, ib.re(c, e), ib.im(c, e), false);
                        re += r;
                        im += i;
                    }
                }
                prog.add_eq(re);
                if a != b {
                    prog.add_eq(im);
                }
            }
        }

        // losses: sum_ab R[a,b] Re I[a,b]
        for a in 0..k {
            for b in 0..k {
                let r = z[(a, b)].re;
                if r != 0.0 {
                    losses += &(ib.re(a, b).clone() * r);
                }
            }
        }

        // line limits on |diag S|
        if relax != Some(Family::LineLimits) {
            let rows = line_offset(model, l);
            for a in 0..k {
                let cap = bounds.line[rows + a].upper.max(0.0);
                prog.add_soc(
                    LinExpr::constant(cap),
                    vec![sb.re(a, a).clone(), sb.im(a, a).clone()],
                );
            }
        }
    }

    // nodal balance at each non-slack bus:
    // diag(S_l - Z_l I_l) - sum_children diag(S_p) + s_net = 0
    for (n, bus) in model.buses.iter().enumerate() {
        let Some(l) = topo.parent_branch[n] else { continue };
        let z = &model.branches[l].z;
        let ib = &i_blocks[l];
        let sb = &s_blocks[l];
        for (a, p) in bus.phases.iter().enumerate() {
            let mut re = sb.re(a, a).clone() + injection[n][a].0.clone();
            let mut im = sb.im(a, a).clone() + injection[n][a].1.clone();
            for c in 0..bus.phases.len() {
                let (r, i) = cmul(z[(a, c)], ib.re(c, a), ib.im(c, a), false);
                re -= r;
                im -= i;
            }
            for &child in &topo.children[n] {
                let cbr = &model.branches[child];
                if let Some(ca) = cbr.phases.position(p) {
                    re -= s_blocks[child].re(ca, ca).clone();
                    im -= s_blocks[child].im(ca, ca).clone();
                }
            }
            prog.add_eq(re);
            prog.add_eq(im);
        }
    }

    // voltage limits with slacks
    for (row, (n, p)) in model.bus_phases().into_iter().enumerate() {
        let a = model.buses[n].phases.position(p).expect("bus phase");
        let w = w_blocks[n].re(a, a).clone();
        let vb = bounds.voltage[row];
        if cfg.voltage_slacks {
            let up = prog.add_var_lb(format!("Vp{t}.{}.{p}", model.buses[n].id), 0.0);
            let dn = prog.add_var_lb(format!("Vm{t}.{}.{p}", model.buses[n].id), 0.0);
            step_obj.add_term(up, cfg.slack_penalty);
            step_obj.add_term(dn, cfg.slack_penalty);
            if relax != Some(Family::VoltageLimits) {
                prog.add_le(w.clone(), LinExpr::constant(vb.upper) + LinExpr::var(up));
                prog.add_le(LinExpr::constant(vb.lower) - LinExpr::var(dn), w);
            }
            vars.slack.push(Some((up, dn)));
        } else {
            if relax != Some(Family::VoltageLimits) {
                prog.add_le(w.clone(), LinExpr::constant(vb.upper));
                prog.add_le(LinExpr::constant(vb.lower), w);
            }
            vars.slack.push(None);
        }
    }

    step_obj += &losses;
    (vars, losses, step_obj)
}

fn minor_cones(prog: &mut ConicProgram, m: &Block) {
    for a in 0..m.k {
        for b in a + 1..m.k {
            let (daa, dbb) = (m.re(a, a).clone(), m.re(b, b).clone());
            prog.add_soc(
                daa.clone() + dbb.clone(),
                vec![m.re(a, b).clone() * 2.0, m.im(a, b).clone() * 2.0, daa - dbb],
            );
        }
    }
}

fn line_offset(model: &FeederModel, branch: usize) -> usize {
    model.branches[..branch].iter().map(|b| b.phases.len()).sum()
}

/// Per-DER, per-step set-points and SoC trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSchedule {
    /// `[step][der]`
    pub setpoints: Vec<Vec<DerSetpoint>>,
    /// `[der][0..=steps]`, zeros for DERs without a battery.
    pub soc: Vec<Vec<f64>>,
}

impl DispatchSchedule {
    pub fn steps(&self) -> usize {
        self.setpoints.len()
    }
}

#[derive(Debug, Clone)]
pub struct SocpSolution {
    pub schedule: DispatchSchedule,
    pub lifted: Vec<LiftedState>,
    /// Full objective (losses + slack penalty + SCD penalty).
    pub objective: f64,
    pub step_losses: Vec<f64>,
    /// `[step][voltage row]` as (V+, V-).
    pub voltage_slack: Vec<Vec<(f64, f64)>>,
    pub relaxation_gap: Vec<f64>,
    pub status: ConicStatus,
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub duality_gap: f64,
}

impl SocpSolution {
    pub fn total_losses(&self) -> f64 {
        self.step_losses.iter().sum()
    }

    pub fn slack_total(&self, t: usize) -> f64 {
        self.voltage_slack[t].iter().map(|(u, d)| u + d).sum()
    }
}

/// Solves a built program. Infeasible programs are re-solved with one
/// constraint family at a time dropped to name the culprit.
pub fn solve_program(
    model: &FeederModel,
    series: &TimeSeries,
    bounds: &TightenedBounds,
    cfg: &SolverConfig,
    soc0: &[f64],
) -> Result<SocpSolution> {
    let built = build_program_from(model, series, bounds, cfg, soc0, None)?;
    let sol = built.program.solve(&cfg.conic_settings())?;
    match sol.status {
        ConicStatus::Optimal | ConicStatus::AlmostOptimal | ConicStatus::TimeLimit => {
            Ok(extract(model, &built, cfg, soc0, &sol))
        }
        ConicStatus::Infeasible => {
            let mut restoring = None;
            for family in Family::ALL {
                let relaxed = build_program_from(model, series, bounds, cfg, soc0, Some(family))?;
                let s = relaxed.program.solve(&cfg.conic_settings())?;
                if s.status.is_solved() {
                    restoring = Some(family.label().to_string());
                    break;
                }
            }
            Err(Error::Infeasible {
                restoring_family: restoring,
            })
        }
        other => Err(Error::Solver(format!("conic solve ended with {other:?}"))),
    }
}

fn extract(model: &FeederModel, built: &SocpProgram, cfg: &SolverConfig, soc0: &[f64], sol: &ConicSolution) -> SocpSolution {
    let x = &sol.x;
    let slack = model.slack_bus;
    let w0 = outer(&model.slack_voltage, &model.slack_voltage);
    let herm = |hv: &HermVars| -> CMat {
        let k = hv.diag.len();
        let mut m = CMat::zeros(k, k);
        for (a, &d) in hv.diag.iter().enumerate() {
            m[(a, a)] = C64::new(x[d], 0.0);
        }
        for &(a, b, r, i) in &hv.off {
            m[(a, b)] = C64::new(x[r], x[i]);
            m[(b, a)] = C64::new(x[r], -x[i]);
        }
        m
    };

    let mut lifted = Vec::with_capacity(built.horizon);
    let mut setpoints = Vec::with_capacity(built.horizon);
    let mut soc: Vec<Vec<f64>> = model
        .ders
        .iter()
        .zip(soc0)
        .map(|(d, &b)| vec![if d.battery.is_some() { b } else { 0.0 }])
        .collect();
    let mut voltage_slack = Vec::with_capacity(built.horizon);

    for sv in &built.steps {
        let w = sv
            .w
            .iter()
            .enumerate()
            .map(|(n, hv)| match hv {
                Some(hv) => herm(hv),
                None if n == slack => w0.clone(),
                None => unreachable!("only the slack bus has a constant W"),
            })
            .collect();
        let i = sv.i.iter().map(herm).collect();
        let s = sv
            .s
            .iter()
            .map(|vars| {
                let k = (vars.len() as f64).sqrt().round() as usize;
                CMat::from_fn(k, k, |a, b| {
                    let (r, im) = vars[a * k + b];
                    C64::new(x[r], x[im])
                })
            })
            .collect();
        lifted.push(LiftedState { w, i, s });

        let mut step = Vec::with_capacity(model.ders.len());
        for d in 0..model.ders.len() {
            let mut sp = DerSetpoint::default();
            if let (Some([pd, pc, qb, _]), Some(bat)) = (sv.battery[d], &model.ders[d].battery) {
                // An interior-point optimum can leave both powers marginally
                // positive; only the net is physical.
                let (pd, pc) = (x[pd].max(0.0), x[pc].max(0.0));
                let both = pd.min(pc);
                sp.p_discharge = pd - both;
                sp.p_charge = pc - both;
                sp.q_battery = x[qb];
                let prev = *soc[d].last().expect("initial soc");
                soc[d].push(soc_update(prev, sp.p_charge, sp.p_discharge, bat, built.dt_hours));
            } else {
                soc[d].push(0.0);
            }
            if let Some([ps, qs]) = sv.solar[d] {
                sp.solar = C64::new(x[ps].max(0.0), x[qs]);
            }
            step.push(sp);
        }
        setpoints.push(step);
        voltage_slack.push(
            sv.slack
                .iter()
                .map(|s| s.map(|(u, d)| (x[u].max(0.0), x[d].max(0.0))).unwrap_or((0.0, 0.0)))
                .collect(),
        );
    }

    let step_losses: Vec<f64> = built.loss_terms.iter().map(|e| e.eval(x)).collect();
    let relaxation_gap = lifted.iter().map(|l| rank1_gap(model, l)).collect();
    // Evaluated at the extracted point: the solver's own value carries the
    // primal residual of the slacks times the slack penalty.
    let scd: f64 = setpoints
        .iter()
        .flat_map(|step| step.iter().zip(&model.ders))
        .filter_map(|(sp, d)| d.battery.map(|b| sp.p_discharge * (1.0 / b.eta_d - b.eta_c)))
        .sum();
    let slack: f64 = voltage_slack.iter().flatten().map(|&(u, d)| u + d).sum();
    let objective = step_losses.iter().sum::<f64>() + cfg.scd_penalty * scd + cfg.slack_penalty * slack;
    debug_assert!((objective - sol.objective).abs() < 1e-4 * objective.abs().max(1.0));
    debug_assert!(lifted
        .iter()
        .zip(&step_losses)
        .all(|(l, s)| (compute_losses(model, l) - s).abs() < 1e-9 * s.abs().max(1.0)));

    SocpSolution {
        schedule: DispatchSchedule { setpoints, soc },
        lifted,
        objective,
        step_losses,
        voltage_slack,
        relaxation_gap,
        status: sol.status,
        iterations: sol.iterations,
        primal_residual: sol.primal_residual,
        dual_residual: sol.dual_residual,
        duality_gap: sol.gap,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::tests::{bus, line};
    use crate::feeder::{DerSpec, SolarSpec};
    use crate::linalg::c64;
    use crate::loadflow::{solve_loadflow, InjectionSet};
    use crate::phase::Phase;

    fn battery() -> BatterySpec {
        BatterySpec {
            p_max: 0.2,
            h_max: 0.25,
            b_min: 0.1,
            b_max: 1.0,
            b_init: 0.5,
            eta_c: 0.95,
            eta_d: 0.95,
        }
    }

    fn two_bus(ders: Vec<DerSpec>) -> FeederModel {
        FeederModel::new(
            "two",
            1.0,
            1.0,
            0,
            None,
            vec![bus("1", "a"), bus("2", "a")],
            vec![line("l", 0, 1, "a", (0.01, 0.02))],
            ders,
        )
        .unwrap()
    }

    fn loaded(model: &FeederModel, steps: usize, load: C64) -> TimeSeries {
        let mut s = TimeSeries::zeros(model.buses.len(), steps, 1.0 / 60.0);
        for t in 0..steps {
            s.set_demand(1, Phase::A, t, load);
        }
        s
    }

    #[test]
    fn slack_only_is_trivial() {
        let m = FeederModel::new("s", 1.0, 1.0, 0, None, vec![bus("1", "abc")], vec![], vec![])
            .unwrap();
        let series = TimeSeries::zeros(1, 1, 1.0);
        let b = TightenedBounds::untightened(&m, 1);
        let sol = solve_program(&m, &series, &b, &SolverConfig::default(), &[]).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert_eq!(sol.total_losses(), 0.0);
    }

    #[test]
    fn variable_count_two_bus_battery() {
        let m = two_bus(vec![DerSpec {
            id: "b".into(),
            bus: 1,
            phase: Phase::A,
            battery: Some(battery()),
            solar: None,
        }]);
        let series = loaded(&m, 2, c64(0.1, 0.02));
        let b = TightenedBounds::untightened(&m, 2);
        let p = build_program(&m, &series, &b, &SolverConfig::default()).unwrap();
        // per step: W 1, I 1, S 2, battery 3 + SoC 1, slacks 2
        assert_eq!(p.program.n_vars(), 20);
    }

    #[test]
    fn exact_without_ders() {
        let m = two_bus(vec![]);
        let load = c64(0.5, 0.1);
        let series = loaded(&m, 1, load);
        let b = TightenedBounds::untightened(&m, 1);
        let sol = solve_program(&m, &series, &b, &SolverConfig::default(), &[]).unwrap();
        let mut inj = InjectionSet::zeros(&m);
        inj.add(1, Phase::A, -load);
        let st = solve_loadflow(&m, &inj).unwrap();
        let lf = compute_losses(&m, &st.lifted(&m));
        assert!((sol.total_losses() - lf).abs() < 1e-5, "{} vs {lf}", sol.total_losses());
        assert!(sol.relaxation_gap[0] < 1e-5);
    }

    #[test]
    fn soc_dynamics() {
        let spec = battery();
        let dt = 1.0 / 60.0;
        let charged = soc_update(0.5, 0.2, 0.0, &spec, dt);
        assert!((charged - 0.503_166_67).abs() < 1e-7);
        let discharged = soc_update(0.5, 0.0, 0.2, &spec, dt);
        assert!((discharged - 0.496_491_2).abs() < 1e-6);
    }

    #[test]
    fn soc_trajectory_follows_dispatch() {
        let m = two_bus(vec![DerSpec {
            id: "b".into(),
            bus: 1,
            phase: Phase::A,
            battery: Some(battery()),
            solar: None,
        }]);
        let series = loaded(&m, 3, c64(0.4, 0.1));
        let b = TightenedBounds::untightened(&m, 3);
        let sol = solve_program(&m, &series, &b, &SolverConfig::default(), &[0.5]).unwrap();
        let spec = battery();
        for t in 0..3 {
            let sp = sol.schedule.setpoints[t][0];
            let next = soc_update(sol.schedule.soc[0][t], sp.p_charge, sp.p_discharge, &spec, series.dt_hours);
            assert!((next - sol.schedule.soc[0][t + 1]).abs() < 1e-7);
        }
        assert_eq!(sol.schedule.soc[0][0], 0.5);
    }

    #[test]
    fn stressed_voltage_uses_slack() {
        let mut m = two_bus(vec![]);
        m.buses[1].v_min = 0.999;
        let series = loaded(&m, 1, c64(0.5, 0.1));
        let b = TightenedBounds::untightened(&m, 1);
        let sol = solve_program(&m, &series, &b, &SolverConfig::default(), &[]).unwrap();
        assert!(sol.status.is_solved());
        assert!(sol.voltage_slack[0][0].1 > 1e-4);
    }

    #[test]
    fn solar_curtailment_respects_availability() {
        let m = two_bus(vec![DerSpec {
            id: "pv".into(),
            bus: 1,
            phase: Phase::A,
            battery: None,
            solar: Some(SolarSpec { g_max: 0.3 }),
        }]);
        let mut series = loaded(&m, 1, c64(0.2, 0.05));
        series.set_solar(1, Phase::A, 0, 0.25);
        let b = TightenedBounds::untightened(&m, 1);
        let sol = solve_program(&m, &series, &b, &SolverConfig::default(), &[0.0]).unwrap();
        let s = sol.schedule.setpoints[0][0].solar;
        assert!(s.re <= 0.25 + 1e-7 && s.re >= -1e-9);
        assert!(s.norm() <= 0.3 + 1e-7);
    }

    #[test]
    fn hard_limits_report_family() {
        let mut m = two_bus(vec![]);
        m.buses[1].v_min = 0.999;
        let series = loaded(&m, 1, c64(0.5, 0.1));
        let b = TightenedBounds::untightened(&m, 1);
        let cfg = SolverConfig {
            voltage_slacks: false,
            ..SolverConfig::default()
        };
        match solve_program(&m, &series, &b, &cfg, &[]) {
            Err(Error::Infeasible { restoring_family }) => {
                assert_eq!(restoring_family.as_deref(), Some("voltage limits"))
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }
}
