//! First-order response of a load-flow state to nodal injection changes.
//!
//! Nodal admittance `Y` is assembled from the branch admittances `Z^{-1}`.
//! With the slack phasors held fixed, a complex injection change `ds` at
//! the non-slack nodes satisfies
//!
//! ```text
//! ds = diag(conj(i)) dV + diag(V) conj(Y dV)
//! ```
//!
//! which is solved as a real `2n x 2n` system in `(Re dV, Im dV)`.

use nalgebra::{DMatrix, DVector, LU};

use crate::bounds::line_rows;
use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::linalg::{C64, CMat, CVec};
use crate::loadflow::{restrict, NetworkState};
use crate::phase::Phase;

#[derive(Debug, Clone)]
pub struct Linearization {
    /// Global node of each `(bus, phase position)`.
    node: Vec<Vec<usize>>,
    /// Position among the non-slack unknowns, `None` at slack nodes.
    unknown: Vec<Option<usize>>,
    n_unknown: usize,
    y: CMat,
    v: CVec,
    branch_y: Vec<CMat>,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    state: NetworkState,
}

impl Linearization {
    pub fn new(model: &FeederModel, state: &NetworkState) -> Result<Self> {
        let topo = model.topology();
        let mut node = Vec::with_capacity(model.buses.len());
        let mut count = 0;
        for bus in &model.buses {
            node.push((count..count + bus.phases.len()).collect::<Vec<_>>());
            count += bus.phases.len();
        }
        let n = count;
        let mut unknown = vec![None; n];
        let mut n_unknown = 0;
        for (b, nodes) in node.iter().enumerate() {
            if b == model.slack_bus {
                continue;
            }
            for &k in nodes {
                unknown[k] = Some(n_unknown);
                n_unknown += 1;
            }
        }

        let mut y = CMat::zeros(n, n);
        let mut branch_y = Vec::with_capacity(model.branches.len());
        for (l, br) in model.branches.iter().enumerate() {
            let (up, down) = topo.oriented[l];
            let yl = br
                .z
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Solver(format!("branch {} impedance is singular", br.id)))?;
            let up_nodes: Vec<usize> = br
                .phases
                .iter()
                .map(|p| node[up][model.buses[up].phases.position(p).expect("subset")])
                .collect();
            let down_nodes: Vec<usize> = br
                .phases
                .iter()
                .map(|p| node[down][model.buses[down].phases.position(p).expect("subset")])
                .collect();
            for a in 0..br.phases.len() {
                for b in 0..br.phases.len() {
                    y[(up_nodes[a], up_nodes[b])] += yl[(a, b)];
                    y[(down_nodes[a], down_nodes[b])] += yl[(a, b)];
                    y[(up_nodes[a], down_nodes[b])] -= yl[(a, b)];
                    y[(down_nodes[a], up_nodes[b])] -= yl[(a, b)];
                }
            }
            branch_y.push(yl);
        }

        let v = CVec::from_iterator(n, state.voltages.iter().flat_map(|vb| vb.iter().copied()));
        let i = &y * &v;

        // ds = (A + B) x + j (A - B) y with A = diag(conj i), B = diag(V) conj(Y)
        let m = n_unknown;
        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for r in 0..n {
            let Some(ru) = unknown[r] else { continue };
            for c in 0..n {
                let Some(cu) = unknown[c] else { continue };
                let b = v[r] * y[(r, c)].conj();
                let a = if r == c { i[r].conj() } else { C64::default() };
                let plus = a + b;
                let minus = a - b;
                jac[(ru, cu)] = plus.re;
                jac[(ru, m + cu)] = -minus.im;
                jac[(m + ru, cu)] = plus.im;
                jac[(m + ru, m + cu)] = minus.re;
            }
        }
        let lu = jac.lu();
        if m > 0 && !lu.is_invertible() {
            return Err(Error::Solver("power-flow linearization is singular".into()));
        }
        Ok(Linearization {
            node,
            unknown,
            n_unknown,
            y,
            v,
            branch_y,
            lu,
            state: state.clone(),
        })
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    /// Voltage change at every node for an injection change `ds` at
    /// `(bus, phase)`. Injections at the slack bus move nothing.
    pub fn voltage_response(&self, model: &FeederModel, bus: usize, phase: Phase, ds: C64) -> CVec {
        let n = self.v.len();
        let mut dv = CVec::zeros(n);
        let Some(k) = model.buses[bus].phases.position(phase) else {
            return dv;
        };
        let Some(u) = self.unknown[self.node[bus][k]] else {
            return dv;
        };
        let m = self.n_unknown;
        let mut rhs = DVector::<f64>::zeros(2 * m);
        rhs[u] = ds.re;
        rhs[m + u] = ds.im;
        let x = self.lu.solve(&rhs).expect("checked invertible");
        for (node, un) in self.unknown.iter().enumerate() {
            if let Some(un) = un {
                dv[node] = C64::new(x[*un], x[m + *un]);
            }
        }
        dv
    }

    /// Change of squared magnitude per voltage row.
    pub fn squared_voltage(&self, model: &FeederModel, dv: &CVec) -> Vec<f64> {
        model
            .bus_phases()
            .into_iter()
            .map(|(b, p)| {
                let k = self.node[b][model.buses[b].phases.position(p).expect("bus phase")];
                2.0 * (self.v[k].conj() * dv[k]).re
            })
            .collect()
    }

    /// Change of the diagonal sending-end power per line row.
    pub fn line_power(&self, model: &FeederModel, dv: &CVec) -> Vec<C64> {
        let topo = model.topology();
        line_rows(model)
            .into_iter()
            .map(|(l, a)| {
                let br = &model.branches[l];
                let (up, down) = topo.oriented[l];
                let phases = br.phases;
                let up_pos: Vec<usize> = phases
                    .iter()
                    .map(|p| self.node[up][model.buses[up].phases.position(p).expect("subset")])
                    .collect();
                let down_pos: Vec<usize> = phases
                    .iter()
                    .map(|p| self.node[down][model.buses[down].phases.position(p).expect("subset")])
                    .collect();
                let mut di = C64::default();
                for c in 0..phases.len() {
                    di += self.branch_y[l][(a, c)] * (dv[up_pos[c]] - dv[down_pos[c]]);
                }
                let i = self.state.currents[l][a];
                dv[up_pos[a]] * i.conj() + self.v[up_pos[a]] * di.conj()
            })
            .collect()
    }

    /// Change of the total complex power drawn from the slack bus.
    pub fn slack_power(&self, model: &FeederModel, dv: &CVec) -> C64 {
        let dy = &self.y * dv;
        self.node[model.slack_bus]
            .iter()
            .map(|&k| self.v[k] * dy[k].conj())
            .sum()
    }
}

/// Sending-end power on the diagonal of each line row.
pub fn line_powers(model: &FeederModel, state: &NetworkState) -> Vec<C64> {
    let topo = model.topology();
    line_rows(model)
        .into_iter()
        .map(|(l, a)| {
            let up = topo.upstream(l);
            let v = restrict(&state.voltages[up], model.buses[up].phases, model.branches[l].phases);
            v[a] * state.currents[l][a].conj()
        })
        .collect()
}

/// Squared voltage magnitude per voltage row.
pub fn squared_voltages(model: &FeederModel, state: &NetworkState) -> Vec<f64> {
    model
        .bus_phases()
        .into_iter()
        .map(|(b, p)| state.voltage(model, b, p).expect("bus phase").norm_sqr())
        .collect()
}
