//! Per-unit three-phase radial feeder model.
//!
//! Quantities are per-unit on `(base_voltage, base_power)` where the voltage
//! base is line-to-neutral and the power base is per phase, so
//! `z_base = base_voltage^2 / base_power`. Energies are per-unit-hours.
//! Elements with fewer than three phases carry reduced blocks: a branch on
//! phases `ac` has a 2x2 impedance ordered (a, c).

mod io;
mod topology;

use std::collections::HashMap;

pub use io::{load_feeder, parse_feeder, save_feeder, FEEDER_FORMAT_VERSION};
pub use topology::Topology;

use crate::error::{Error, Result};
use crate::linalg::{c64, is_finite, CMat, CVec};
use crate::phase::{Phase, PhaseSet};

#[derive(Debug, Clone, PartialEq)]
pub struct BusSpec {
    pub id: String,
    pub phases: PhaseSet,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub phases: PhaseSet,
    /// Series impedance, reduced to `phases`.
    pub z: CMat,
    /// Per-phase apparent power limit.
    pub s_max: Vec<f64>,
}

impl BranchSpec {
    pub fn r(&self) -> nalgebra::DMatrix<f64> {
        self.z.map(|z| z.re)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatterySpec {
    pub p_max: f64,
    /// Inverter apparent power rating.
    pub h_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub b_init: f64,
    pub eta_c: f64,
    pub eta_d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolarSpec {
    /// Inverter apparent power rating.
    pub g_max: f64,
}

/// A single-phase connected battery and/or solar inverter.
#[derive(Debug, Clone, PartialEq)]
pub struct DerSpec {
    pub id: String,
    pub bus: usize,
    pub phase: Phase,
    pub battery: Option<BatterySpec>,
    pub solar: Option<SolarSpec>,
}

/// Validated per-unit feeder. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    pub name: String,
    /// Line-to-neutral volts.
    pub base_voltage: f64,
    /// Volt-amperes per phase.
    pub base_power: f64,
    pub slack_bus: usize,
    /// Slack phasors on the slack bus phases, p.u.
    pub slack_voltage: CVec,
    pub buses: Vec<BusSpec>,
    pub branches: Vec<BranchSpec>,
    pub ders: Vec<DerSpec>,
    topology: Topology,
}

/// Balanced slack phasors `magnitude` at 0, -120 and +120 degrees,
/// restricted to `phases`.
pub fn balanced_slack(phases: PhaseSet, magnitude: f64) -> CVec {
    CVec::from_iterator(
        phases.len(),
        phases
            .iter()
            .map(|p| c64(magnitude * p.nominal_angle().cos(), magnitude * p.nominal_angle().sin())),
    )
}

impl FeederModel {
    /// Validates and assembles a feeder. `slack_voltage` defaults to a
    /// balanced 1.0 p.u. set.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        base_voltage: f64,
        base_power: f64,
        slack_bus: usize,
        slack_voltage: Option<CVec>,
        buses: Vec<BusSpec>,
        branches: Vec<BranchSpec>,
        ders: Vec<DerSpec>,
    ) -> Result<Self> {
        if !(base_voltage > 0.0 && base_power > 0.0) {
            return Err(Error::validation("bases", "base voltage and power must be positive"));
        }
        if slack_bus >= buses.len() {
            return Err(Error::validation("slack_bus", "index out of range"));
        }
        let mut seen = HashMap::new();
        for (i, bus) in buses.iter().enumerate() {
            if seen.insert(bus.id.clone(), i).is_some() {
                return Err(Error::validation(format!("bus {}", bus.id), "duplicate id"));
            }
            if !(bus.v_min > 0.0 && bus.v_min < bus.v_max) {
                return Err(Error::validation(
                    format!("bus {}", bus.id),
                    format!("need 0 < v_min < v_max, got [{}, {}]", bus.v_min, bus.v_max),
                ));
            }
        }

        for br in &branches {
            validate_branch(br, &buses)?;
        }

        let names: Vec<String> = buses.iter().map(|b| b.id.clone()).collect();
        let edges: Vec<(usize, usize)> = branches.iter().map(|b| (b.from, b.to)).collect();
        let topology = Topology::build(&names, &edges, slack_bus)?;

        for (l, br) in branches.iter().enumerate() {
            let down = &buses[topology.downstream(l)];
            if down.phases != br.phases {
                return Err(Error::validation(
                    format!("branch {}", br.id),
                    format!(
                        "phase mismatch: supplies '{}' but downstream bus {} has '{}'",
                        br.phases, down.id, down.phases
                    ),
                ));
            }
        }

        let slack_phases = buses[slack_bus].phases;
        let slack_voltage = slack_voltage.unwrap_or_else(|| balanced_slack(slack_phases, 1.0));
        if slack_voltage.len() != slack_phases.len() {
            return Err(Error::validation(
                "slack_voltage",
                format!("{} entries for {} slack phases", slack_voltage.len(), slack_phases.len()),
            ));
        }

        for der in &ders {
            validate_der(der, &buses, slack_bus)?;
        }

        Ok(FeederModel {
            name: name.into(),
            base_voltage,
            base_power,
            slack_bus,
            slack_voltage,
            buses,
            branches,
            ders,
            topology,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn z_base(&self) -> f64 {
        self.base_voltage * self.base_voltage / self.base_power
    }

    /// Non-slack (bus, phase) pairs in bus order, then a-b-c.
    pub fn bus_phases(&self) -> Vec<(usize, Phase)> {
        self.buses
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.slack_bus)
            .flat_map(|(i, b)| b.phases.iter().map(move |p| (i, p)))
            .collect()
    }

    pub fn batteries(&self) -> impl Iterator<Item = (usize, &DerSpec, &BatterySpec)> {
        self.ders
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.battery.as_ref().map(|b| (i, d, b)))
    }

    pub fn solar_ders(&self) -> impl Iterator<Item = (usize, &DerSpec, &SolarSpec)> {
        self.ders
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.solar.as_ref().map(|s| (i, d, s)))
    }

    /// Solar DER connected at `(bus, phase)`, if any.
    pub fn solar_at(&self, bus: usize, phase: Phase) -> Option<usize> {
        self.ders
            .iter()
            .position(|d| d.bus == bus && d.phase == phase && d.solar.is_some())
    }
}

fn validate_branch(br: &BranchSpec, buses: &[BusSpec]) -> Result<()> {
    let element = || format!("branch {}", br.id);
    let n = buses.len();
    if br.from >= n || br.to >= n {
        return Err(Error::validation(element(), "endpoint out of range"));
    }
    if br.from == br.to {
        return Err(Error::validation(element(), "self loop"));
    }
    for end in [br.from, br.to] {
        if !br.phases.is_subset(buses[end].phases) {
            return Err(Error::validation(
                element(),
                format!(
                    "phase mismatch: '{}' not available at bus {} ('{}')",
                    br.phases, buses[end].id, buses[end].phases
                ),
            ));
        }
    }
    let k = br.phases.len();
    if br.z.nrows() != k || br.z.ncols() != k {
        return Err(Error::validation(
            element(),
            format!("impedance is {}x{}, expected {k}x{k}", br.z.nrows(), br.z.ncols()),
        ));
    }
    if !is_finite(&br.z) {
        return Err(Error::validation(element(), "non-finite impedance"));
    }
    let scale = br.z.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    for i in 0..k {
        if br.z[(i, i)].re < 0.0 {
            return Err(Error::validation(element(), "negative self resistance"));
        }
        for j in 0..i {
            if (br.z[(i, j)] - br.z[(j, i)]).norm() > 1e-12 * scale {
                return Err(Error::validation(element(), "impedance matrix not symmetric"));
            }
        }
    }
    if br.z.clone().try_inverse().is_none() {
        return Err(Error::validation(element(), "impedance matrix is singular"));
    }
    if br.s_max.len() != k || br.s_max.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::validation(element(), "s_max must be positive for every phase"));
    }
    Ok(())
}

fn validate_der(der: &DerSpec, buses: &[BusSpec], slack: usize) -> Result<()> {
    let element = || format!("der {}", der.id);
    if der.bus >= buses.len() {
        return Err(Error::validation(element(), "bus out of range"));
    }
    if der.bus == slack {
        return Err(Error::validation(element(), "DER at the slack bus"));
    }
    if !buses[der.bus].phases.contains(der.phase) {
        return Err(Error::validation(
            element(),
            format!("phase {} not present at bus {}", der.phase, buses[der.bus].id),
        ));
    }
    if der.battery.is_none() && der.solar.is_none() {
        return Err(Error::validation(element(), "neither battery nor solar"));
    }
    if let Some(b) = &der.battery {
        if !(b.p_max >= 0.0 && b.h_max >= 0.0) {
            return Err(Error::validation(element(), "p_max and h_max must be nonnegative"));
        }
        if !(b.b_min <= b.b_init && b.b_init <= b.b_max) {
            return Err(Error::validation(element(), "need b_min <= b_init <= b_max"));
        }
        for eta in [b.eta_c, b.eta_d] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::validation(element(), "efficiencies must lie in (0, 1]"));
            }
        }
    }
    if let Some(s) = &der.solar {
        if !(s.g_max >= 0.0) {
            return Err(Error::validation(element(), "g_max must be nonnegative"));
        }
    }
    Ok(())
}

/// Validates radiality and returns the orientation rooted at the slack bus.
pub fn validate_radial(model: &FeederModel) -> Result<Topology> {
    let names: Vec<String> = model.buses.iter().map(|b| b.id.clone()).collect();
    let edges: Vec<(usize, usize)> = model.branches.iter().map(|b| (b.from, b.to)).collect();
    Topology::build(&names, &edges, model.slack_bus)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn bus(id: &str, phases: &str) -> BusSpec {
        BusSpec {
            id: id.into(),
            phases: phases.parse().unwrap(),
            v_min: 0.95,
            v_max: 1.05,
        }
    }

    pub(crate) fn line(id: &str, from: usize, to: usize, phases: &str, z: (f64, f64)) -> BranchSpec {
        let set: PhaseSet = phases.parse().unwrap();
        let k = set.len();
        BranchSpec {
            id: id.into(),
            from,
            to,
            phases: set,
            z: CMat::from_diagonal_element(k, k, c64(z.0, z.1)),
            s_max: vec![10.0; k],
        }
    }

    #[test]
    fn minimal_tree() {
        let m = FeederModel::new(
            "two",
            1.0,
            1.0,
            0,
            None,
            vec![bus("1", "a"), bus("2", "a")],
            vec![line("l", 0, 1, "a", (0.01, 0.02))],
            vec![],
        )
        .unwrap();
        assert_eq!(m.buses.len(), 2);
        assert_eq!(m.branches.len(), 1);
        assert_eq!(m.bus_phases(), vec![(1, Phase::A)]);
    }

    #[test]
    fn rejects_phase_mismatch() {
        let err = FeederModel::new(
            "x",
            1.0,
            1.0,
            0,
            None,
            vec![bus("1", "ab"), bus("2", "c")],
            vec![line("l", 0, 1, "c", (0.01, 0.02))],
            vec![],
        )
        .unwrap_err();
        assert!(err.to_string().contains("branch l"), "{err}");
        assert!(err.to_string().contains("phase mismatch"), "{err}");
    }

    #[test]
    fn rejects_bad_bounds_and_asymmetric_z() {
        let mut b = bus("2", "a");
        b.v_min = 1.1;
        let err = FeederModel::new("x", 1.0, 1.0, 0, None, vec![bus("1", "a"), b], vec![], vec![])
            .unwrap_err();
        assert!(err.to_string().contains("bus 2"), "{err}");

        let mut l = line("l", 0, 1, "ab", (0.01, 0.02));
        l.z[(0, 1)] = c64(0.001, 0.0);
        let err = FeederModel::new(
            "x",
            1.0,
            1.0,
            0,
            None,
            vec![bus("1", "ab"), bus("2", "ab")],
            vec![l],
            vec![],
        )
        .unwrap_err();
        assert!(err.to_string().contains("not symmetric"), "{err}");
    }

    #[test]
    fn rejects_bad_battery() {
        let der = DerSpec {
            id: "d".into(),
            bus: 1,
            phase: Phase::A,
            battery: Some(BatterySpec {
                p_max: 0.1,
                h_max: 0.1,
                b_min: 0.2,
                b_max: 1.0,
                b_init: 0.1,
                eta_c: 0.95,
                eta_d: 0.95,
            }),
            solar: None,
        };
        let err = FeederModel::new(
            "x",
            1.0,
            1.0,
            0,
            None,
            vec![bus("1", "a"), bus("2", "a")],
            vec![line("l", 0, 1, "a", (0.01, 0.02))],
            vec![der],
        )
        .unwrap_err();
        assert!(err.to_string().contains("der d"), "{err}");
    }
}
