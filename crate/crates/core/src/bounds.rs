//! Per-step network limits handed to the conic and recovery stages.
//!
//! Rows follow fixed registries: voltage rows in [`FeederModel::bus_phases`]
//! order, line rows in branch-then-phase order, solar rows in DER order
//! over DERs with a solar inverter.

use crate::feeder::FeederModel;
use crate::phase::Phase;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageBound {
    /// Lower bound on squared magnitude.
    pub lower: f64,
    /// Upper bound on squared magnitude.
    pub upper: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperBound {
    pub upper: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepBounds {
    pub voltage: Vec<VoltageBound>,
    pub line: Vec<UpperBound>,
    pub solar: Vec<UpperBound>,
}

impl StepBounds {
    pub fn untightened(model: &FeederModel) -> Self {
        StepBounds {
            voltage: model
                .bus_phases()
                .into_iter()
                .map(|(b, _)| VoltageBound {
                    lower: model.buses[b].v_min.powi(2),
                    upper: model.buses[b].v_max.powi(2),
                    margin: 0.0,
                })
                .collect(),
            line: line_rows(model)
                .into_iter()
                .map(|(l, k)| UpperBound {
                    upper: model.branches[l].s_max[k],
                    margin: 0.0,
                })
                .collect(),
            solar: model
                .solar_ders()
                .map(|(_, _, s)| UpperBound {
                    upper: s.g_max,
                    margin: 0.0,
                })
                .collect(),
        }
    }

    /// True when some voltage window has crossed (`lower > upper`).
    pub fn over_tight(&self) -> bool {
        self.voltage.iter().any(|v| v.lower > v.upper)
            || self.line.iter().any(|l| l.upper < 0.0)
            || self.solar.iter().any(|s| s.upper < 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TightenedBounds {
    pub steps: Vec<StepBounds>,
}

impl TightenedBounds {
    /// Original feeder limits for `steps` steps (all margins zero).
    pub fn untightened(model: &FeederModel, steps: usize) -> Self {
        TightenedBounds {
            steps: vec![StepBounds::untightened(model); steps],
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn over_tight_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.over_tight())
            .map(|(t, _)| t)
            .collect()
    }
}

/// `(branch, position within branch phases)` in registry order.
pub fn line_rows(model: &FeederModel) -> Vec<(usize, usize)> {
    model
        .branches
        .iter()
        .enumerate()
        .flat_map(|(l, br)| (0..br.phases.len()).map(move |k| (l, k)))
        .collect()
}

/// `(bus, phase)` of each voltage row.
pub fn voltage_rows(model: &FeederModel) -> Vec<(usize, Phase)> {
    model.bus_phases()
}
