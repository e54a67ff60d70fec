//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero when
//! any criterion fails.

mod common;

use std::time::Instant;

use feeder_opf::bounds::TightenedBounds;
use feeder_opf::controller::{run_closed_loop, Mode, RunConfig, RunLog};
use feeder_opf::feeder::{BatterySpec, FeederModel};
use feeder_opf::linalg::C64;
use feeder_opf::loadflow::{
    compute_losses, solve_loadflow, solve_loadflow_with, DerSetpoint, InjectionSet, LoadFlowOptions, NetworkState,
};
use feeder_opf::metrics::{compare, step_metrics, ViolationStats};
use feeder_opf::phase::Phase;
use feeder_opf::recovery::{recover_all, FeasibleOperatingPoint};
use feeder_opf::series::TimeSeries;
use feeder_opf::socp::{soc_update, solve_program, SolverConfig};
use feeder_opf::tightening::{compute_sensitivities, safety_factor, RobustConfig, SafetyDistribution};
use feeder_opf::uncertainty::{ErrorFamily, Quantity, UncertaintyConfig, UncertaintyModel};
use feeder_opf::Result;

type Outcome = Result<(bool, String)>;

/// Deterministic and stochastic closed loops on the 13-bus feeder.
struct MonteCarlo {
    model: FeederModel,
    det: RunLog,
    sto: RunLog,
    seconds: f64,
}

fn monte_carlo() -> Result<MonteCarlo> {
    let (model, series) = common::ieee13();
    let unc = UncertaintyModel::new(
        &model,
        &series,
        UncertaintyConfig {
            family: ErrorFamily::Uniform,
            ..Default::default()
        },
    )?;
    let base = RunConfig {
        horizon: 12,
        steps: 60,
        scenarios: 200,
        seed: 2024,
        robust: RobustConfig {
            alpha_v: 0.10,
            ..RobustConfig::default()
        },
        ..RunConfig::default()
    };
    let start = Instant::now();
    let det = run_closed_loop(&model, &series, &unc, &RunConfig { mode: Mode::Deterministic, ..base.clone() })?;
    let sto = run_closed_loop(&model, &series, &unc, &RunConfig { mode: Mode::Stochastic, ..base })?;
    Ok(MonteCarlo {
        model,
        det,
        sto,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One-sided tail bound for unimodal distributions.
fn unimodal_oracle(alpha: f64) -> f64 {
    (4.0 / (9.0 * alpha) - 1.0).sqrt()
}

fn criterion_1() -> Outcome {
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for alpha in [0.01, 0.02, 0.05, 0.10] {
        let approx = safety_factor(SafetyDistribution::Unimodal, alpha)?;
        let exact = unimodal_oracle(alpha);
        let rel = (approx - exact).abs() / exact;
        worst = worst.max(rel);
        detail.push(format!("a={alpha}: {approx:.4} vs {exact:.4}"));
    }
    let anchors = (unimodal_oracle(0.10) - 1.856).abs() < 1e-3 && (unimodal_oracle(0.05) - 2.809).abs() < 1e-3;
    Ok((worst < 0.05 && anchors, format!("max rel err {worst:.4}; {}", detail.join(", "))))
}

fn criterion_2() -> Outcome {
    let mut ok = true;
    for k in 0..50 {
        let a = 0.01 + 0.48 * k as f64 / 49.0;
        let g = safety_factor(SafetyDistribution::Gaussian, a)?;
        let u = safety_factor(SafetyDistribution::Unimodal, a)?;
        let c = safety_factor(SafetyDistribution::Chebyshev, a)?;
        ok &= g <= u && u <= c;
    }
    let g = safety_factor(SafetyDistribution::Gaussian, 0.10)?;
    let u = safety_factor(SafetyDistribution::Unimodal, 0.10)?;
    let c = safety_factor(SafetyDistribution::Chebyshev, 0.10)?;
    let strict = g < u && u < c && (g - 1.2816).abs() < 1e-4 && (u - 1.8478).abs() < 1e-4 && (c - 3.0).abs() < 1e-12;
    Ok((ok && strict, format!("50-point grid ordered; at 0.10: {g:.4} < {u:.4} < {c:.4}")))
}

fn criterion_3(mc: &MonteCarlo) -> Outcome {
    let d = ViolationStats::from_rows(&step_metrics(&mc.model, &mc.det));
    let s = ViolationStats::from_rows(&step_metrics(&mc.model, &mc.sto));
    let limit = 0.10 + 2.0 * s.rate_std_error;
    Ok((
        s.violation_rate <= limit && d.violation_rate > s.violation_rate,
        format!(
            "stochastic {:.4} (limit {limit:.4}), deterministic {:.4}, {} samples each, {:.0} s for both runs",
            s.violation_rate, d.violation_rate, s.samples, mc.seconds
        ),
    ))
}

fn criterion_4(mc: &MonteCarlo) -> Outcome {
    let c = compare(&step_metrics(&mc.model, &mc.det), &step_metrics(&mc.model, &mc.sto))?;
    Ok((
        c.b.losses >= c.a.losses,
        format!(
            "losses {:.4} -> {:.4} p.u.; net demand increase {:.3}%, rmse {:.2e}",
            c.a.losses,
            c.b.losses,
            100.0 * c.relative_net_demand_increase,
            c.net_demand_rmse
        ),
    ))
}

fn fixture_windows() -> Vec<(FeederModel, TimeSeries)> {
    let (tb, tbs) = common::two_bus();
    let (ie, ies) = common::ieee13();
    vec![
        (tb.clone(), tbs.window(0, 20)),
        (tb, tbs.window(20, 20)),
        (ie.clone(), ies.window(0, 12)),
        (ie.clone(), ies.window(29, 12)),
        (ie, ies.window(60, 12)),
    ]
}

fn criterion_5(mc: &MonteCarlo) -> Outcome {
    let cfg = SolverConfig::default();
    let (mut checked, mut worst) = (0usize, f64::NEG_INFINITY);
    let mut ok = true;
    let mut check = |socp: f64, recovered: f64| {
        let shortfall = (socp - recovered) / socp.abs().max(1.0);
        worst = worst.max(shortfall);
        ok &= shortfall <= 1e-6;
        checked += 1;
    };
    for (m, w) in fixture_windows() {
        let b = TightenedBounds::untightened(&m, w.steps());
        let socp = solve_program(&m, &w, &b, &cfg, &common::initial_soc(&m))?;
        for (t, p) in recover_all(&m, &w, &socp, &b, &cfg)?.iter().enumerate() {
            check(socp.step_losses[t], p.losses);
        }
    }
    for log in [&mc.det, &mc.sto] {
        for r in &log.steps {
            check(r.socp_loss, r.recovered_loss);
        }
    }
    Ok((ok, format!("{checked} solved steps, largest relative shortfall {worst:.2e}")))
}

fn plant_disagreement(m: &FeederModel, w: &TimeSeries, p: &FeasibleOperatingPoint) -> Result<f64> {
    let st = solve_loadflow(m, &InjectionSet::compose(m, w, 0, &p.setpoints))?;
    Ok(st
        .voltages
        .iter()
        .zip(&p.state.voltages)
        .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()))
        .fold(0.0, f64::max))
}

fn criterion_6(mc: &MonteCarlo) -> Outcome {
    let cfg = SolverConfig::default();
    let (mut gap, mut dv, mut n) = (0.0f64, 0.0f64, 0usize);
    for (m, w) in fixture_windows() {
        let b = TightenedBounds::untightened(&m, w.steps());
        let socp = solve_program(&m, &w, &b, &cfg, &common::initial_soc(&m))?;
        for p in recover_all(&m, &w, &socp, &b, &cfg)? {
            gap = gap.max(p.rank1_gap);
            dv = dv.max(plant_disagreement(&m, &w.window(p.step, 1), &p)?);
            n += 1;
        }
    }
    for log in [&mc.det, &mc.sto] {
        for r in &log.steps {
            gap = gap.max(r.recovered_gap);
            n += 1;
        }
    }
    Ok((gap < 1e-6 && dv < 1e-6, format!("{n} recovered points, rank-1 gap {gap:.2e}, plant |dV| {dv:.2e}")))
}

fn criterion_7() -> Outcome {
    let (m, s) = common::two_bus();
    let z = m.branches[0].z[(0, 0)];
    let load = s.demand(1, Phase::A, 0);
    let mut v = C64::new(1.0, 0.0);
    for _ in 0..500 {
        v = C64::new(1.0, 0.0) - z * (load / v).conj();
    }
    let idle = vec![DerSetpoint::default(); m.ders.len()];
    let st = solve_loadflow(&m, &InjectionSet::compose(&m, &s, 0, &idle))?;
    let got = st.voltages[1][0].norm();
    let mut mismatch = st.mismatch;
    for (fm, fs) in [common::two_bus(), common::ieee13()] {
        let idle = vec![DerSetpoint::default(); fm.ders.len()];
        for t in 0..fs.steps() {
            mismatch = mismatch.max(solve_loadflow(&fm, &InjectionSet::compose(&fm, &fs, t, &idle))?.mismatch);
        }
    }
    let ok = (got - v.norm()).abs() < 1e-4 && (got - 0.9929).abs() < 1e-4 && mismatch < 1e-8;
    Ok((ok, format!("|V2| {got:.6} vs oracle {:.6}; worst mismatch {mismatch:.1e}", v.norm())))
}

/// Constrained quantities recomputed from a state: squared voltages, line
/// apparent powers, solar apparent powers.
fn quantities(m: &FeederModel, st: &NetworkState, sp: &[DerSetpoint]) -> Vec<f64> {
    let mut out: Vec<f64> = m
        .bus_phases()
        .into_iter()
        .map(|(b, p)| st.voltage(m, b, p).unwrap().norm_sqr())
        .collect();
    let topo = m.topology();
    for (l, br) in m.branches.iter().enumerate() {
        let up = topo.upstream(l);
        for (k, p) in br.phases.iter().enumerate() {
            let v = st.voltage(m, up, p).unwrap();
            out.push((v * st.currents[l][k].conj()).norm());
        }
    }
    out.extend(m.solar_ders().map(|(d, _, _)| sp[d].solar.norm()));
    out
}

fn criterion_8() -> Outcome {
    let (m, s) = common::ieee13();
    let w = s.window(0, 1);
    let b = TightenedBounds::untightened(&m, 1);
    let cfg = SolverConfig::default();
    let socp = solve_program(&m, &w, &b, &cfg, &common::initial_soc(&m))?;
    let point = recover_all(&m, &w, &socp, &b, &cfg)?.remove(0);
    let unc = UncertaintyModel::new(&m, &w, UncertaintyConfig::default())?;
    let sens = compute_sensitivities(&m, &w, &point, &unc)?;
    let analytic = |row: usize, col: usize| {
        let (nv, nl) = (sens.voltage.nrows(), sens.line.nrows());
        if row < nv {
            sens.voltage[(row, col)]
        } else if row < nv + nl {
            sens.line[(row - nv, col)]
        } else {
            sens.solar[(row - nv - nl, col)]
        }
    };

    let opts = LoadFlowOptions {
        tolerance: 1e-14,
        mismatch_tolerance: 1e-12,
        max_sweeps: 1000,
        ..LoadFlowOptions::default()
    };
    let h = 1e-4;
    let n_rows = quantities(&m, &point.state, &point.setpoints).len();
    let mut fd = vec![vec![0.0; unc.len()]; n_rows];
    for (j, inj) in unc.injections.iter().enumerate() {
        let eval = |sign: f64| -> Result<Vec<f64>> {
            let mut sp = point.setpoints.clone();
            let mut extra = C64::default();
            match (inj.quantity, m.solar_at(inj.bus, inj.phase)) {
                (Quantity::Solar, Some(d)) => sp[d].solar.re += sign * h,
                (Quantity::Solar, None) => extra = C64::new(sign * h, 0.0),
                (Quantity::Demand, _) => {
                    let d = w.demand(inj.bus, inj.phase, 0);
                    extra = -d / d.norm() * sign * h;
                }
            }
            let mut set = InjectionSet::compose(&m, &w, 0, &sp);
            set.add(inj.bus, inj.phase, extra);
            let st = solve_loadflow_with(&m, &set, &m.slack_voltage, opts)?;
            Ok(quantities(&m, &st, &sp))
        };
        let (up, down) = (eval(1.0)?, eval(-1.0)?);
        for r in 0..n_rows {
            fd[r][j] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    let mut worst = 0.0f64;
    for (r, row) in fd.iter().enumerate() {
        let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (j, want) in row.iter().enumerate() {
            let err = (analytic(r, j) - want).abs();
            worst = worst.max(if scale > 1e-9 { err / scale } else { err });
        }
    }
    Ok((worst < 1e-3, format!("{n_rows} rows x {} injections, worst relative error {worst:.2e}", unc.len())))
}

fn criterion_9() -> Outcome {
    let (m, s) = common::ieee13();
    let off = UncertaintyModel::new(&m, &s, UncertaintyConfig { scale: 0.0, ..Default::default() })?;
    let cfg = RunConfig {
        horizon: 6,
        steps: 3,
        scenarios: 4,
        ..RunConfig::default()
    };
    let det = run_closed_loop(&m, &s, &off, &RunConfig { mode: Mode::Deterministic, ..cfg.clone() })?;
    let sto = run_closed_loop(&m, &s, &off, &RunConfig { mode: Mode::Stochastic, ..cfg })?;
    let identical = det.same_outcome(&sto);

    let st = solve_loadflow(&m, &InjectionSet::zeros(&m))?;
    let losses = compute_losses(&m, &st.lifted(&m));
    let slack = m.slack_bus;
    let flat = m.buses.iter().enumerate().all(|(b, bus)| {
        bus.phases.iter().all(|p| {
            st.voltage(&m, b, p) == st.voltage(&m, slack, p)
        })
    });

    let spec = BatterySpec {
        p_max: 0.2,
        h_max: 0.25,
        b_min: 0.1,
        b_max: 1.0,
        b_init: 0.5,
        eta_c: 0.95,
        eta_d: 0.95,
    };
    let up = soc_update(0.5, 0.2, 0.0, &spec, 1.0 / 60.0);
    let down = soc_update(0.5, 0.0, 0.2, &spec, 1.0 / 60.0);
    let soc_ok = (up - 0.503167).abs() < 1e-6 && (down - 0.496491).abs() < 1e-6;
    Ok((
        identical && losses == 0.0 && flat && soc_ok,
        format!("sigma=0 identical: {identical}; zero injection losses {losses:e}, flat: {flat}; soc {up:.6} / {down:.6}"),
    ))
}

fn criterion_10(mc: &MonteCarlo) -> Outcome {
    let lam: Vec<Vec<f64>> = mc
        .sto
        .steps
        .iter()
        .map(|r| r.bounds.steps[0].voltage.iter().map(|v| v.margin).collect())
        .collect();
    let rows = lam[0].len();
    let mut rises = true;
    let mut drops = 0;
    let mut exposed = 0;
    for r in 0..rows {
        if lam[29][r] <= 0.0 {
            continue;
        }
        exposed += 1;
        for t in 1..lam.len() {
            if t % 30 != 0 {
                rises &= lam[t][r] >= lam[t - 1][r];
            }
        }
        drops += usize::from(lam[30][r] < lam[29][r]);
    }
    // Margins along one horizon also grow with lead.
    let mut horizon_rises = true;
    for rec in &mc.sto.steps {
        for r in 0..rows {
            for k in 1..rec.bounds.steps.len() {
                horizon_rises &= rec.bounds.steps[k].voltage[r].margin >= rec.bounds.steps[k - 1].voltage[r].margin - 1e-12;
            }
        }
    }
    let mean = |t: usize| lam[t].iter().sum::<f64>() / rows as f64;
    Ok((
        exposed > 0 && rises && drops == exposed,
        format!(
            "{exposed} exposed rows; mean lambda {:.2e} at t=0, {:.2e} at t=29, {:.2e} at t=30; within-horizon growth: {horizon_rises}",
            mean(0),
            mean(29),
            mean(30)
        ),
    ))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        println!("criterion {n:2} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    };
    report(1, "unimodal factor fidelity", criterion_1());
    report(2, "safety factor ordering", criterion_2());
    report(7, "load-flow oracle", criterion_7());
    report(8, "sensitivity correctness", criterion_8());
    report(9, "degenerate reductions", criterion_9());
    match monte_carlo() {
        Ok(mc) => {
            report(3, "Monte-Carlo violation rate", criterion_3(&mc));
            report(4, "conservativeness ordering", criterion_4(&mc));
            report(5, "relaxation lower bound", criterion_5(&mc));
            report(6, "AC exactness", criterion_6(&mc));
            report(10, "bound trajectory shape", criterion_10(&mc));
        }
        Err(e) => {
            for (n, name) in [(3, "Monte-Carlo violation rate"), (4, "conservativeness ordering"), (5, "relaxation lower bound"), (6, "AC exactness"), (10, "bound trajectory shape")] {
                report(n, name, Err(feeder_opf::Error::Solver(format!("closed-loop runs failed: {e}"))));
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
