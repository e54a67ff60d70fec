//! Unbalanced three-phase forward/backward sweep on the radial tree.
//!
//! Loads are constant power. Branch currents flow from the upstream to the
//! downstream bus; `S_l = V_up i_l^H` is the sending-end power matrix.

use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::linalg::{outer, C64, CMat, CVec};
use crate::phase::{Phase, PhaseSet};
use crate::series::TimeSeries;

/// Net complex injection per bus on that bus's phases (generation positive).
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSet {
    per_bus: Vec<CVec>,
    phases: Vec<PhaseSet>,
}

/// Set-points of one DER at one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerSetpoint {
    pub p_discharge: f64,
    pub p_charge: f64,
    pub q_battery: f64,
    pub solar: C64,
}

impl DerSetpoint {
    pub fn injection(&self) -> C64 {
        C64::new(self.p_discharge - self.p_charge, self.q_battery) + self.solar
    }
}

impl InjectionSet {
    pub fn zeros(model: &FeederModel) -> Self {
        InjectionSet {
            per_bus: model.buses.iter().map(|b| CVec::zeros(b.phases.len())).collect(),
            phases: model.buses.iter().map(|b| b.phases).collect(),
        }
    }

    /// Net injection at step `t`: DER set-points, solar at phases without a
    /// solar DER (uncontrolled), minus demand.
    pub fn compose(
        model: &FeederModel,
        series: &TimeSeries,
        t: usize,
        setpoints: &[DerSetpoint],
    ) -> Self {
        let mut inj = InjectionSet::zeros(model);
        for (b, bus) in model.buses.iter().enumerate() {
            for p in bus.phases.iter() {
                let mut s = -series.demand(b, p, t);
                if model.solar_at(b, p).is_none() {
                    s += series.solar(b, p, t);
                }
                inj.add(b, p, s);
            }
        }
        for (der, sp) in model.ders.iter().zip(setpoints) {
            inj.add(der.bus, der.phase, sp.injection());
        }
        inj
    }

    pub fn get(&self, bus: usize, phase: Phase) -> C64 {
        self.phases[bus]
            .position(phase)
            .map(|k| self.per_bus[bus][k])
            .unwrap_or_default()
    }

    pub fn add(&mut self, bus: usize, phase: Phase, s: C64) {
        let k = self.phases[bus]
            .position(phase)
            .unwrap_or_else(|| panic!("phase {phase} absent at bus {bus}"));
        self.per_bus[bus][k] += s;
    }

    pub fn bus(&self, bus: usize) -> &CVec {
        &self.per_bus[bus]
    }

    /// Real part of the total non-slack injection.
    pub fn total_real(&self) -> f64 {
        self.per_bus.iter().flat_map(|v| v.iter()).map(|s| s.re).sum()
    }
}

/// Lifted branch-flow variables: `W = V V^H` per bus, `I = i i^H` and
/// `S = V_up i^H` per branch. Produced exactly by the load flow and
/// approximately (relaxed) by the conic stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedState {
    pub w: Vec<CMat>,
    pub i: Vec<CMat>,
    pub s: Vec<CMat>,
}

/// Phasor solution of the load flow with its lifted view.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub voltages: Vec<CVec>,
    pub currents: Vec<CVec>,
    pub sweeps: usize,
    pub mismatch: f64,
}

impl NetworkState {
    pub fn lifted(&self, model: &FeederModel) -> LiftedState {
        let topo = model.topology();
        LiftedState {
            w: self.voltages.iter().map(|v| outer(v, v)).collect(),
            i: self.currents.iter().map(|i| outer(i, i)).collect(),
            s: model
                .branches
                .iter()
                .enumerate()
                .map(|(l, br)| {
                    let up = topo.upstream(l);
                    let v = restrict(&self.voltages[up], model.buses[up].phases, br.phases);
                    outer(&v, &self.currents[l])
                })
                .collect(),
        }
    }

    pub fn voltage(&self, model: &FeederModel, bus: usize, phase: Phase) -> Option<C64> {
        model.buses[bus]
            .phases
            .position(phase)
            .map(|k| self.voltages[bus][k])
    }

    /// Complex power leaving the slack bus into the feeder, per slack phase.
    pub fn slack_injection(&self, model: &FeederModel) -> CVec {
        let slack = model.slack_bus;
        let phases = model.buses[slack].phases;
        let mut out = CVec::zeros(phases.len());
        for &l in &model.topology().children[slack] {
            let br = &model.branches[l];
            for (k, p) in br.phases.iter().enumerate() {
                let pos = phases.position(p).expect("branch phases within slack phases");
                let v = self.voltages[slack][pos];
                out[pos] += v * self.currents[l][k].conj();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadFlowOptions {
    /// Convergence threshold on the voltage update, inf-norm p.u.
    pub tolerance: f64,
    /// Required power-balance mismatch, inf-norm p.u.
    pub mismatch_tolerance: f64,
    pub max_sweeps: usize,
    /// Any |V| below this during iteration is reported as collapse.
    pub collapse_voltage: f64,
}

impl Default for LoadFlowOptions {
    fn default() -> Self {
        LoadFlowOptions {
            tolerance: 1e-10,
            mismatch_tolerance: 1e-9,
            max_sweeps: 100,
            collapse_voltage: 0.5,
        }
    }
}

/// Values of `v` (ordered by `from`) on the phases of `to`.
pub fn restrict(v: &CVec, from: PhaseSet, to: PhaseSet) -> CVec {
    CVec::from_iterator(
        to.len(),
        to.iter().map(|p| v[from.position(p).expect("phase subset")]),
    )
}

pub fn solve_loadflow(model: &FeederModel, inj: &InjectionSet) -> Result<NetworkState> {
    solve_loadflow_with(model, inj, &model.slack_voltage, LoadFlowOptions::default())
}

pub fn solve_loadflow_with(
    model: &FeederModel,
    inj: &InjectionSet,
    slack_voltage: &CVec,
    opts: LoadFlowOptions,
) -> Result<NetworkState> {
    let topo = model.topology();
    let slack = model.slack_bus;
    let slack_phases = model.buses[slack].phases;
    if slack_voltage.len() != slack_phases.len() {
        return Err(Error::Dimension(format!(
            "slack voltage has {} entries for {} phases",
            slack_voltage.len(),
            slack_phases.len()
        )));
    }

    // flat start: every phase at its slack phasor
    let mut nominal = [C64::new(1.0, 0.0); 3];
    for (k, p) in slack_phases.iter().enumerate() {
        nominal[p.index()] = slack_voltage[k];
    }
    for p in Phase::ALL {
        if !slack_phases.contains(p) {
            nominal[p.index()] = C64::from_polar(1.0, p.nominal_angle());
        }
    }
    let mut voltages: Vec<CVec> = model
        .buses
        .iter()
        .map(|b| CVec::from_iterator(b.phases.len(), b.phases.iter().map(|p| nominal[p.index()])))
        .collect();
    voltages[slack] = slack_voltage.clone();
    let mut currents: Vec<CVec> = model
        .branches
        .iter()
        .map(|b| CVec::zeros(b.phases.len()))
        .collect();

    let mut last_update = f64::INFINITY;
    let mut mismatch = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        backward_sweep(model, inj, &voltages, &mut currents);

        last_update = 0.0;
        for &bus in topo.order.iter().skip(1) {
            let l = topo.parent_branch[bus].expect("non-slack bus has a parent");
            let up = topo.upstream(l);
            let br = &model.branches[l];
            let v_up = restrict(&voltages[up], model.buses[up].phases, br.phases);
            let v_new = v_up - &br.z * &currents[l];
            for (k, v) in v_new.iter().enumerate() {
                last_update = last_update.max((v - voltages[bus][k]).norm());
                if v.norm() < opts.collapse_voltage {
                    let phase = br.phases.iter().nth(k).expect("index within phases");
                    return Err(Error::VoltageCollapse {
                        element: format!("bus {} phase {phase}", model.buses[bus].id),
                        magnitude: v.norm(),
                    });
                }
            }
            voltages[bus] = v_new;
        }

        if last_update < opts.tolerance {
            backward_sweep(model, inj, &voltages, &mut currents);
            mismatch = ohmic_mismatch(model, inj, &voltages);
            if mismatch < opts.mismatch_tolerance {
                return Ok(NetworkState {
                    voltages,
                    currents,
                    sweeps: sweep,
                    mismatch,
                });
            }
        }
    }
    if mismatch.is_infinite() {
        mismatch = ohmic_mismatch(model, inj, &voltages);
    }
    log::debug!("load flow stalled, last update {last_update:.3e}");
    Err(Error::NonConvergence {
        sweeps: opts.max_sweeps,
        mismatch,
    })
}

fn backward_sweep(model: &FeederModel, inj: &InjectionSet, voltages: &[CVec], currents: &mut [CVec]) {
    let topo = model.topology();
    for &bus in topo.order.iter().rev() {
        let Some(l) = topo.parent_branch[bus] else { continue };
        let phases = model.buses[bus].phases;
        // current drawn by the bus itself
        let mut i = CVec::from_iterator(
            phases.len(),
            (0..phases.len()).map(|k| (-inj.per_bus[bus][k] / voltages[bus][k]).conj()),
        );
        for &child in &topo.children[bus] {
            let cphases = model.branches[child].phases;
            for (k, p) in cphases.iter().enumerate() {
                i[phases.position(p).expect("child phases within bus")] += currents[child][k];
            }
        }
        currents[l] = i;
    }
}

/// Power-balance mismatch with branch currents recomputed from Ohm's law,
/// independent of the currents carried by the sweep.
fn ohmic_mismatch(model: &FeederModel, inj: &InjectionSet, voltages: &[CVec]) -> f64 {
    let topo = model.topology();
    let ohmic: Vec<CVec> = model
        .branches
        .iter()
        .enumerate()
        .map(|(l, br)| {
            let (up, down) = topo.oriented[l];
            let dv = restrict(&voltages[up], model.buses[up].phases, br.phases) - &voltages[down];
            br.z.clone().lu().solve(&dv).expect("validated impedance is invertible")
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (bus, spec) in model.buses.iter().enumerate() {
        if bus == model.slack_bus {
            continue;
        }
        let phases = spec.phases;
        let mut out = CVec::zeros(phases.len());
        for &child in &topo.children[bus] {
            for (k, p) in model.branches[child].phases.iter().enumerate() {
                out[phases.position(p).expect("subset")] += ohmic[child][k];
            }
        }
        if let Some(l) = topo.parent_branch[bus] {
            out -= &ohmic[l];
        }
        for k in 0..phases.len() {
            let s = voltages[bus][k] * out[k].conj();
            worst = worst.max((s - inj.per_bus[bus][k]).norm());
        }
    }
    worst
}

/// Series losses `sum_l Re tr(R_l I_l)`, the real part of the full
/// Hadamard sum of `R_l` and `I_l`. Equals the net real injection into the
/// feeder for a load-flow state.
pub fn compute_losses(model: &FeederModel, lifted: &LiftedState) -> f64 {
    model
        .branches
        .iter()
        .zip(&lifted.i)
        .map(|(br, i)| {
            let k = br.phases.len();
            let mut acc = 0.0;
            for a in 0..k {
                for b in 0..k {
                    acc += br.z[(a, b)].re * i[(a, b)].re;
                }
            }
            acc
        })
        .sum()
}

/// Largest normalized 2x2-minor defect `|det| / trace^2` over voltage,
/// current and mixed voltage/current minors. Zero iff every minor is
/// rank one.
pub fn rank1_gap(model: &FeederModel, lifted: &LiftedState) -> f64 {
    let topo = model.topology();
    let mut gap: f64 = 0.0;
    let mut check = |a: f64, b: f64, off: C64| {
        let trace = a + b;
        if trace.abs() > 1e-14 {
            gap = gap.max((a * b - off.norm_sqr()).abs() / (trace * trace));
        }
    };
    for m in lifted.w.iter().chain(&lifted.i) {
        let k = m.nrows();
        for a in 0..k {
            for b in a + 1..k {
                check(m[(a, a)].re, m[(b, b)].re, m[(a, b)]);
            }
        }
    }
    for (l, br) in model.branches.iter().enumerate() {
        let up = topo.upstream(l);
        let up_phases = model.buses[up].phases;
        for (a, pa) in br.phases.iter().enumerate() {
            let wa = up_phases.position(pa).expect("subset");
            for b in 0..br.phases.len() {
                check(lifted.w[up][(wa, wa)].re, lifted.i[l][(b, b)].re, lifted.s[l][(a, b)]);
            }
        }
    }
    gap
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::tests::{bus, line};
    use crate::linalg::c64;

    fn two_bus() -> FeederModel {
        FeederModel::new(
            "two",
            1.0,
            1.0,
            0,
            None,
            vec![bus("1", "a"), bus("2", "a")],
            vec![line("l", 0, 1, "a", (0.01, 0.02))],
            vec![],
        )
        .unwrap()
    }

    /// Scalar fixed point `V = 1 - z conj(s / V)` iterated by hand.
    fn scalar_oracle(z: C64, load: C64) -> C64 {
        let mut v = c64(1.0, 0.0);
        for _ in 0..200 {
            v = c64(1.0, 0.0) - z * (load / v).conj();
        }
        v
    }

    #[test]
    fn zero_injection_is_flat() {
        let m = two_bus();
        let st = solve_loadflow(&m, &InjectionSet::zeros(&m)).unwrap();
        assert!((st.voltages[1][0] - c64(1.0, 0.0)).norm() < 1e-15);
        assert_eq!(st.currents[0][0], C64::default());
        assert_eq!(compute_losses(&m, &st.lifted(&m)), 0.0);
    }

    #[test]
    fn two_bus_matches_scalar_oracle() {
        let m = two_bus();
        let mut inj = InjectionSet::zeros(&m);
        inj.add(1, Phase::A, c64(-0.5, -0.1));
        let st = solve_loadflow(&m, &inj).unwrap();
        let v = scalar_oracle(c64(0.01, 0.02), c64(0.5, 0.1));
        assert!((st.voltages[1][0] - v).norm() < 1e-10);
        assert!((v.norm() - 0.9929).abs() < 1e-4);
        assert!(st.mismatch < 1e-8);

        let i = st.currents[0][0].norm();
        let losses = compute_losses(&m, &st.lifted(&m));
        assert!((losses - 0.01 * i * i).abs() < 1e-15);
        let balance = st.slack_injection(&m)[0].re + inj.total_real();
        assert!((losses - balance).abs() < 1e-10);
    }

    #[test]
    fn rank1_gap_cases() {
        let m = FeederModel::new(
            "two",
            1.0,
            1.0,
            0,
            None,
            vec![bus("1", "ab"), bus("2", "ab")],
            vec![line("l", 0, 1, "ab", (0.01, 0.02))],
            vec![],
        )
        .unwrap();
        let v = CVec::from_vec(vec![c64(1.0, 0.1), c64(-0.4, 0.9)]);
        let i = CVec::from_vec(vec![c64(0.2, -0.1), c64(0.3, 0.05)]);
        let lifted = LiftedState {
            w: vec![outer(&v, &v), outer(&v, &v)],
            i: vec![outer(&i, &i)],
            s: vec![outer(&v, &i)],
        };
        assert!(rank1_gap(&m, &lifted) < 1e-15);

        let mut broken = lifted.clone();
        broken.w[1] = CMat::identity(2, 2);
        assert!((rank1_gap(&m, &broken) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn collapse_is_reported() {
        let m = two_bus();
        let mut inj = InjectionSet::zeros(&m);
        inj.add(1, Phase::A, c64(-30.0, -10.0));
        let err = solve_loadflow(&m, &inj).unwrap_err();
        assert!(
            matches!(err, Error::VoltageCollapse { .. } | Error::NonConvergence { .. }),
            "{err}"
        );
    }
}
