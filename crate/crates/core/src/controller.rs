//! Receding-horizon closed loop: plan over the forecast window, apply the
//! first step to the plant with realized injections, carry the SoC forward.
//!
//! Plans depend only on the forecast and on the SoC reached with the
//! applied battery powers, never on realized injections, so the control
//! trajectory is computed once per run and the Monte-Carlo scenarios only
//! re-run the plant load flow.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::TightenedBounds;
use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::loadflow::{compute_losses, solve_loadflow, DerSetpoint, InjectionSet};
use crate::recovery::{recover, recover_all, RecoveryDiagnostics};
use crate::series::TimeSeries;
use crate::socp::{soc_update, solve_program, SolverConfig};
use crate::tightening::{tighten, RobustConfig};
use crate::uncertainty::{Quantity, UncertaintyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Deterministic,
    Stochastic,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Deterministic => "deterministic",
            Mode::Stochastic => "stochastic",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Mode::Deterministic),
            "stochastic" => Ok(Mode::Stochastic),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Optimization horizon in steps.
    pub horizon: usize,
    /// Closed-loop steps to execute.
    pub steps: usize,
    pub robust: RobustConfig,
    pub solver: SolverConfig,
    pub seed: u64,
    pub scenarios: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Deterministic,
            horizon: 12,
            steps: 60,
            robust: RobustConfig::default(),
            solver: SolverConfig::default(),
            seed: 1,
            scenarios: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.steps == 0 {
            return Err(Error::Config("horizon and steps must be at least 1".into()));
        }
        if self.scenarios == 0 {
            return Err(Error::Config("at least one scenario is required".into()));
        }
        self.robust.validate()?;
        self.solver.validate()
    }
}

/// Controller output for one closed-loop step (shared by all scenarios).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub applied: Vec<DerSetpoint>,
    /// SoC per DER before the step.
    pub soc: Vec<f64>,
    /// SOCP loss term of the applied step.
    pub socp_loss: f64,
    /// Loss of the recovered point at the forecast injections.
    pub recovered_loss: f64,
    pub recovered_gap: f64,
    /// Voltage slacks of the applied SOCP step.
    pub socp_slack: f64,
    pub recovery: RecoveryDiagnostics,
    pub socp_iterations: u32,
    /// Bounds the applied plan was solved against.
    pub bounds: TightenedBounds,
    /// Lead of the forecast in force.
    pub lead: usize,
}

/// Plant outcome of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioLog {
    pub index: usize,
    /// `|V|` per voltage row, `[step][row]`.
    pub voltages: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    /// Real demand served.
    pub served_demand: Vec<f64>,
    /// Real power imported at the slack bus.
    pub import: Vec<f64>,
    pub sweeps: Vec<usize>,
    pub mismatch: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub mode: Mode,
    pub seed: u64,
    pub horizon: usize,
    pub steps: Vec<StepRecord>,
    /// Applied SoC trajectory, `[der][0..=steps]`.
    pub soc: Vec<Vec<f64>>,
    pub scenarios: Vec<ScenarioLog>,
}

impl RunLog {
    /// Equality of everything except the mode label.
    pub fn same_outcome(&self, other: &RunLog) -> bool {
        self.steps == other.steps && self.soc == other.soc && self.scenarios == other.scenarios
    }
}

/// Control trajectory of a run.
pub fn plan_closed_loop(
    model: &FeederModel,
    series: &TimeSeries,
    unc: &UncertaintyModel,
    cfg: &RunConfig,
) -> Result<(Vec<StepRecord>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    series.validate(model)?;
    let mut soc: Vec<f64> = model
        .ders
        .iter()
        .map(|d| d.battery.map(|b| b.b_init).unwrap_or(0.0))
        .collect();
    let mut soc_log: Vec<Vec<f64>> = soc.iter().map(|&b| vec![b]).collect();
    let mut records = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let rec = plan_step(model, series, unc, cfg, t, &soc).map_err(|e| e.at_step(t))?;
        for (d, der) in model.ders.iter().enumerate() {
            if let Some(bat) = &der.battery {
                let sp = &rec.applied[d];
                soc[d] = soc_update(soc[d], sp.p_charge, sp.p_discharge, bat, series.dt_hours);
            }
            soc_log[d].push(soc[d]);
        }
        log::info!(
            "{} step {t}: socp loss {:.6e}, recovered {:.6e}, recovery iterations {}",
            cfg.mode,
            rec.socp_loss,
            rec.recovered_loss,
            rec.recovery.iterations
        );
        records.push(rec);
    }
    Ok((records, soc_log))
}

fn plan_step(
    model: &FeederModel,
    series: &TimeSeries,
    unc: &UncertaintyModel,
    cfg: &RunConfig,
    t: usize,
    soc: &[f64],
) -> Result<StepRecord> {
    let window = series.window(t, cfg.horizon);
    let plain = TightenedBounds::untightened(model, cfg.horizon);
    let det = solve_program(model, &window, &plain, &cfg.solver, soc)?;
    let (socp, bounds) = match cfg.mode {
        Mode::Deterministic => (det, plain),
        Mode::Stochastic => {
            let anchor = recover_all(model, &window, &det, &plain, &cfg.solver)?;
            let bounds = tighten(model, &window, &anchor, unc, &cfg.robust, t)?;
            let robust = solve_program(model, &window, &bounds, &cfg.solver, soc)?;
            (robust, bounds)
        }
    };
    let point = recover(model, &window, &socp, 0, &bounds, &cfg.solver)?;
    Ok(StepRecord {
        step: t,
        applied: point.setpoints.clone(),
        soc: soc.to_vec(),
        socp_loss: socp.step_losses[0],
        recovered_loss: point.losses,
        recovered_gap: point.rank1_gap,
        socp_slack: socp.slack_total(0),
        recovery: point.diagnostics(),
        socp_iterations: socp.iterations,
        bounds,
        lead: unc.refresh_lead(t),
    })
}

/// Plant simulation of scenario `index` under a fixed control trajectory.
pub fn simulate_scenario(
    model: &FeederModel,
    series: &TimeSeries,
    unc: &UncertaintyModel,
    records: &[StepRecord],
    seed: u64,
    index: usize,
) -> Result<ScenarioLog> {
    let steps = records.len();
    let real = unc.sample_realization(series, steps, seed, index as u64);
    let rows = model.bus_phases();
    let mut log = ScenarioLog {
        index,
        voltages: Vec::with_capacity(steps),
        losses: Vec::with_capacity(steps),
        served_demand: Vec::with_capacity(steps),
        import: Vec::with_capacity(steps),
        sweeps: Vec::with_capacity(steps),
        mismatch: Vec::with_capacity(steps),
    };
    for (t, rec) in records.iter().enumerate() {
        let realized = real.apply(unc, series, t);
        let mut sp = rec.applied.clone();
        for (i, inj) in unc.injections.iter().enumerate() {
            if inj.quantity == Quantity::Solar {
                if let Some(d) = model.solar_at(inj.bus, inj.phase) {
                    sp[d].solar.re = (sp[d].solar.re + real.errors[t][i]).max(0.0);
                }
            }
        }
        let inj = InjectionSet::compose(model, &realized, 0, &sp);
        let state = solve_loadflow(model, &inj).map_err(|e| e.at_step(t))?;
        log.voltages.push(
            rows.iter()
                .map(|&(b, p)| state.voltage(model, b, p).expect("bus phase").norm())
                .collect(),
        );
        log.losses.push(compute_losses(model, &state.lifted(model)));
        let served: f64 = model
            .buses
            .iter()
            .enumerate()
            .filter(|(b, _)| *b != model.slack_bus)
            .flat_map(|(b, bus)| bus.phases.iter().map(move |p| (b, p)))
            .map(|(b, p)| realized.demand(b, p, 0).re)
            .sum();
        log.served_demand.push(served);
        log.import.push(state.slack_injection(model).iter().map(|s| s.re).sum());
        log.sweeps.push(state.sweeps);
        log.mismatch.push(state.mismatch);
    }
    Ok(log)
}

pub fn run_closed_loop(
    model: &FeederModel,
    series: &TimeSeries,
    unc: &UncertaintyModel,
    cfg: &RunConfig,
) -> Result<RunLog> {
    let (steps, soc) = plan_closed_loop(model, series, unc, cfg)?;
    let scenarios = (0..cfg.scenarios)
        .into_par_iter()
        .map(|s| simulate_scenario(model, series, unc, &steps, cfg.seed, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunLog {
        mode: cfg.mode,
        seed: cfg.seed,
        horizon: cfg.horizon,
        steps,
        soc,
        scenarios,
    })
}
