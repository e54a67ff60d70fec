//! Plant-side statistics of closed-loop runs.
//!
//! Everything is computed from per-(scenario, step) rows so that runs read
//! back from disk and runs held in memory share one code path.

use serde::{Deserialize, Serialize};

use crate::controller::RunLog;
use crate::error::{Error, Result};
use crate::feeder::FeederModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub scenario: usize,
    pub step: usize,
    /// Bus-phase voltage samples.
    pub samples: usize,
    /// Samples outside the original `[v_min, v_max]`.
    pub violations: usize,
    pub losses: f64,
    pub served_demand: f64,
    pub net_demand: f64,
    /// Mean over three-phase buses of the largest phase deviation from the
    /// phase-mean magnitude, over the phase-mean.
    pub imbalance: f64,
}

pub fn step_metrics(model: &FeederModel, log: &RunLog) -> Vec<StepMetrics> {
    let rows = model.bus_phases();
    let three_phase: Vec<Vec<usize>> = model
        .buses
        .iter()
        .enumerate()
        .filter(|(b, bus)| *b != model.slack_bus && bus.phases.len() == 3)
        .map(|(b, _)| {
            rows.iter()
                .enumerate()
                .filter(|(_, (rb, _))| *rb == b)
                .map(|(r, _)| r)
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for sc in &log.scenarios {
        for (t, v) in sc.voltages.iter().enumerate() {
            let violations = rows
                .iter()
                .zip(v)
                .filter(|(&(b, _), &mag)| mag < model.buses[b].v_min || mag > model.buses[b].v_max)
                .count();
            out.push(StepMetrics {
                scenario: sc.index,
                step: t,
                samples: v.len(),
                violations,
                losses: sc.losses[t],
                served_demand: sc.served_demand[t],
                net_demand: sc.served_demand[t] + sc.losses[t],
                imbalance: imbalance(&three_phase, v),
            });
        }
    }
    out
}

fn imbalance(groups: &[Vec<usize>], v: &[f64]) -> f64 {
    if groups.is_empty() {
        return 0.0;
    }
    let total: f64 = groups
        .iter()
        .map(|g| {
            let mean = g.iter().map(|&r| v[r]).sum::<f64>() / g.len() as f64;
            g.iter().map(|&r| (v[r] - mean).abs()).fold(0.0, f64::max) / mean
        })
        .sum();
    total / groups.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationStats {
    pub samples: usize,
    pub violations: usize,
    pub violation_rate: f64,
    /// Binomial standard error of the rate at `p = rate`.
    pub rate_std_error: f64,
    /// Total losses summed over scenarios and steps (p.u. power x steps).
    pub losses: f64,
    pub net_demand: f64,
    pub mean_imbalance: f64,
}

impl ViolationStats {
    pub fn from_rows(rows: &[StepMetrics]) -> Self {
        let samples: usize = rows.iter().map(|r| r.samples).sum();
        let violations: usize = rows.iter().map(|r| r.violations).sum();
        let rate = if samples > 0 { violations as f64 / samples as f64 } else { 0.0 };
        let se = if samples > 0 { (rate * (1.0 - rate) / samples as f64).sqrt() } else { 0.0 };
        let mean_imbalance = if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| r.imbalance).sum::<f64>() / rows.len() as f64
        };
        ViolationStats {
            samples,
            violations,
            violation_rate: rate,
            rate_std_error: se,
            losses: rows.iter().map(|r| r.losses).sum(),
            net_demand: rows.iter().map(|r| r.net_demand).sum(),
            mean_imbalance,
        }
    }
}

/// Paired comparison of two runs, `b - a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: ViolationStats,
    pub b: ViolationStats,
    pub delta_losses: f64,
    pub delta_net_demand: f64,
    /// `delta_net_demand / a.net_demand`
    pub relative_net_demand_increase: f64,
    pub delta_violation_rate: f64,
    pub delta_imbalance: f64,
    /// RMSE of per-(scenario, step) net demand.
    pub net_demand_rmse: f64,
}

pub fn compare(a: &[StepMetrics], b: &[StepMetrics]) -> Result<Comparison> {
    if a.len() != b.len() {
        return Err(Error::Mismatch(format!("runs have {} and {} rows", a.len(), b.len())));
    }
    let mut sq = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        if (ra.scenario, ra.step) != (rb.scenario, rb.step) {
            return Err(Error::Mismatch(format!(
                "row (scenario {}, step {}) paired with (scenario {}, step {})",
                ra.scenario, ra.step, rb.scenario, rb.step
            )));
        }
        sq += (rb.net_demand - ra.net_demand).powi(2);
    }
    let sa = ViolationStats::from_rows(a);
    let sb = ViolationStats::from_rows(b);
    let rmse = if a.is_empty() { 0.0 } else { (sq / a.len() as f64).sqrt() };
    let dn = sb.net_demand - sa.net_demand;
    Ok(Comparison {
        a: sa,
        b: sb,
        delta_losses: sb.losses - sa.losses,
        delta_net_demand: dn,
        relative_net_demand_increase: if sa.net_demand != 0.0 { dn / sa.net_demand } else { 0.0 },
        delta_violation_rate: sb.violation_rate - sa.violation_rate,
        delta_imbalance: sb.mean_imbalance - sa.mean_imbalance,
        net_demand_rmse: rmse,
    })
}

/// Voltage-magnitude histogram over all scenarios, steps and rows as
/// `(lower bin edge, count)` with bins of `width` aligned to multiples of it.
pub fn voltage_histogram(log: &RunLog, width: f64) -> Vec<(f64, usize)> {
    let values: Vec<f64> = log
        .scenarios
        .iter()
        .flat_map(|s| s.voltages.iter().flatten().copied())
        .collect();
    if values.is_empty() {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = (lo / width).floor() as i64;
    let last = (hi / width).floor() as i64;
    let n = (last - first + 1) as usize;
    let mut counts = vec![0usize; n];
    for v in values {
        let k = ((v / width).floor() as i64 - first) as usize;
        counts[k.min(n - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| ((first + k as i64) as f64 * width, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scenario: usize, step: usize, net: f64, viol: usize) -> StepMetrics {
        StepMetrics {
            scenario,
            step,
            samples: 10,
            violations: viol,
            losses: 0.01,
            served_demand: net - 0.01,
            net_demand: net,
            imbalance: 0.0,
        }
    }

    #[test]
    fn self_comparison_is_zero() {
        let rows = vec![row(0, 0, 1.0, 1), row(0, 1, 1.1, 0)];
        let c = compare(&rows, &rows).unwrap();
        assert_eq!(c.delta_losses, 0.0);
        assert_eq!(c.net_demand_rmse, 0.0);
        assert_eq!(c.delta_violation_rate, 0.0);
        assert!((c.a.violation_rate - 0.05).abs() < 1e-15);
    }

    #[test]
    fn rmse_and_mismatch() {
        let a = vec![row(0, 0, 1.0, 0), row(0, 1, 1.0, 0)];
        let b = vec![row(0, 0, 1.3, 0), row(0, 1, 0.6, 0)];
        let c = compare(&a, &b).unwrap();
        assert!((c.net_demand_rmse - (0.125f64).sqrt()).abs() < 1e-12);
        assert!(compare(&a, &b[..1]).is_err());
    }

    #[test]
    fn balanced_has_no_imbalance() {
        assert_eq!(imbalance(&[vec![0, 1, 2]], &[1.01, 1.01, 1.01]), 0.0);
        let x = imbalance(&[vec![0, 1, 2]], &[1.0, 1.0, 1.03]);
        assert!((x - 0.02 / 1.01).abs() < 1e-12);
    }
}
