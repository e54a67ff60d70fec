//! Feeder document schema (TOML).
//!
//! Impedances are in ohms, powers in kW/kVA, energies in kWh and voltage
//! limits in p.u.; everything is converted to per-unit on load and back on
//! save. Matrices are given restricted to the element's phases.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BatterySpec, BranchSpec, BusSpec, DerSpec, FeederModel, SolarSpec};
use crate::error::{Error, Result};
use crate::linalg::{c64, CMat, CVec};
use crate::phase::{Phase, PhaseSet};

pub const FEEDER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederDoc {
    format_version: u32,
    name: String,
    /// Line-to-neutral volts.
    base_voltage: f64,
    /// VA per phase.
    base_power: f64,
    slack_bus: String,
    #[serde(default = "one")]
    slack_voltage_pu: f64,
    #[serde(default)]
    slack_angle_deg: f64,
    #[serde(rename = "bus")]
    buses: Vec<BusDoc>,
    #[serde(rename = "branch", default)]
    branches: Vec<BranchDoc>,
    #[serde(rename = "der", default)]
    ders: Vec<DerDoc>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusDoc {
    id: String,
    phases: PhaseSet,
    v_min: f64,
    v_max: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchDoc {
    id: String,
    from: String,
    to: String,
    phases: PhaseSet,
    r_ohm: Vec<Vec<f64>>,
    x_ohm: Vec<Vec<f64>>,
    s_max_kva: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DerDoc {
    id: String,
    bus: String,
    phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    battery: Option<BatteryDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    solar: Option<SolarDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatteryDoc {
    p_max_kw: f64,
    h_max_kva: f64,
    b_min_kwh: f64,
    b_max_kwh: f64,
    b_init_kwh: f64,
    eta_c: f64,
    eta_d: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolarDoc {
    g_max_kva: f64,
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::parse(path, e))?;
    parse_feeder(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path, message),
        other => other,
    })
}

pub fn parse_feeder(text: &str) -> Result<FeederModel> {
    let doc: FeederDoc = toml::from_str(text).map_err(|e| Error::parse("<feeder>", e))?;
    if doc.format_version != FEEDER_FORMAT_VERSION {
        return Err(Error::parse(
            "<feeder>",
            format!(
                "unsupported format_version {} (expected {FEEDER_FORMAT_VERSION})",
                doc.format_version
            ),
        ));
    }
    from_doc(doc)
}

pub fn save_feeder(model: &FeederModel, path: impl AsRef<Path>) -> Result<()> {
    let doc = to_doc(model);
    let text = toml::to_string_pretty(&doc).map_err(|e| Error::parse(path.as_ref(), e))?;
    fs::write(path, text)?;
    Ok(())
}

fn from_doc(doc: FeederDoc) -> Result<FeederModel> {
    if !(doc.base_voltage > 0.0 && doc.base_power > 0.0) {
        return Err(Error::validation("bases", "base voltage and power must be positive"));
    }
    let z_base = doc.base_voltage * doc.base_voltage / doc.base_power;
    let kva = 1e3 / doc.base_power;

    let buses: Vec<BusSpec> = doc
        .buses
        .iter()
        .map(|b| BusSpec {
            id: b.id.clone(),
            phases: b.phases,
            v_min: b.v_min,
            v_max: b.v_max,
        })
        .collect();
    let lookup = |id: &str, element: &str| -> Result<usize> {
        buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| Error::validation(element, format!("unknown bus '{id}'")))
    };

    let slack_bus = lookup(&doc.slack_bus, "slack_bus")?;

    let mut branches = Vec::with_capacity(doc.branches.len());
    for b in &doc.branches {
        let element = format!("branch {}", b.id);
        let k = b.phases.len();
        let shape_ok = |m: &Vec<Vec<f64>>| m.len() == k && m.iter().all(|row| row.len() == k);
        if !shape_ok(&b.r_ohm) || !shape_ok(&b.x_ohm) {
            return Err(Error::validation(
                element,
                format!("impedance must be {k}x{k} for phases '{}'", b.phases),
            ));
        }
        let z = CMat::from_fn(k, k, |i, j| c64(b.r_ohm[i][j], b.x_ohm[i][j]) / z_base);
        branches.push(BranchSpec {
            id: b.id.clone(),
            from: lookup(&b.from, &element)?,
            to: lookup(&b.to, &element)?,
            phases: b.phases,
            z,
            s_max: b.s_max_kva.iter().map(|s| s * kva).collect(),
        });
    }

    let mut ders = Vec::with_capacity(doc.ders.len());
    for d in &doc.ders {
        let element = format!("der {}", d.id);
        ders.push(DerSpec {
            id: d.id.clone(),
            bus: lookup(&d.bus, &element)?,
            phase: d.phase,
            battery: d.battery.as_ref().map(|b| BatterySpec {
                p_max: b.p_max_kw * kva,
                h_max: b.h_max_kva * kva,
                b_min: b.b_min_kwh * kva,
                b_max: b.b_max_kwh * kva,
                b_init: b.b_init_kwh * kva,
                eta_c: b.eta_c,
                eta_d: b.eta_d,
            }),
            solar: d.solar.as_ref().map(|s| SolarSpec {
                g_max: s.g_max_kva * kva,
            }),
        });
    }

    let slack_phases = buses[slack_bus].phases;
    let shift = doc.slack_angle_deg.to_radians();
    let slack_voltage = CVec::from_iterator(
        slack_phases.len(),
        slack_phases
            .iter()
            .map(|p| num_complex::Complex64::from_polar(doc.slack_voltage_pu, p.nominal_angle() + shift)),
    );

    FeederModel::new(
        doc.name,
        doc.base_voltage,
        doc.base_power,
        slack_bus,
        Some(slack_voltage),
        buses,
        branches,
        ders,
    )
}

fn to_doc(model: &FeederModel) -> FeederDoc {
    let z_base = model.z_base();
    let to_kva = model.base_power / 1e3;
    let name = |i: usize| model.buses[i].id.clone();
    let first = model.slack_voltage[0];
    let first_phase = model.buses[model.slack_bus].phases.iter().next().unwrap_or(Phase::A);
    FeederDoc {
        format_version: FEEDER_FORMAT_VERSION,
        name: model.name.clone(),
        base_voltage: model.base_voltage,
        base_power: model.base_power,
        slack_bus: name(model.slack_bus),
        slack_voltage_pu: first.norm(),
        slack_angle_deg: (first.arg() - first_phase.nominal_angle()).to_degrees(),
        buses: model
            .buses
            .iter()
            .map(|b| BusDoc {
                id: b.id.clone(),
                phases: b.phases,
                v_min: b.v_min,
                v_max: b.v_max,
            })
            .collect(),
        branches: model
            .branches
            .iter()
            .map(|b| {
                let k = b.phases.len();
                let grid = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
                    (0..k).map(|i| (0..k).map(|j| f(i, j)).collect()).collect()
                };
                BranchDoc {
                    id: b.id.clone(),
                    from: name(b.from),
                    to: name(b.to),
                    phases: b.phases,
                    r_ohm: grid(&|i, j| b.z[(i, j)].re * z_base),
                    x_ohm: grid(&|i, j| b.z[(i, j)].im * z_base),
                    s_max_kva: b.s_max.iter().map(|s| s * to_kva).collect(),
                }
            })
            .collect(),
        ders: model
            .ders
            .iter()
            .map(|d| DerDoc {
                id: d.id.clone(),
                bus: name(d.bus),
                phase: d.phase,
                battery: d.battery.map(|b| BatteryDoc {
                    p_max_kw: b.p_max * to_kva,
                    h_max_kva: b.h_max * to_kva,
                    b_min_kwh: b.b_min * to_kva,
                    b_max_kwh: b.b_max * to_kva,
                    b_init_kwh: b.b_init * to_kva,
                    eta_c: b.eta_c,
                    eta_d: b.eta_d,
                }),
                solar: d.solar.map(|s| SolarDoc {
                    g_max_kva: s.g_max * to_kva,
                }),
            })
            .collect(),
    }
}
