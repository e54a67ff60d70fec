//! Run directories: columnar CSV files plus a JSON summary.
//!
//! ```text
//! summary.json         configuration, input digest, aggregate statistics
//! metrics.csv          per (scenario, step) plant metrics
//! steps.csv            per-step solve and recovery diagnostics
//! dispatch.csv         applied set-points and SoC per DER
//! bounds.csv           tightened bounds of every solved horizon
//! histogram.csv        plant voltage magnitude histogram
//! voltages/NNNN.csv    plant |V| per step and bus phase, one file per scenario
//! ```
//!
//! Every file starts with a `format_version` line. Output is a pure
//! function of the inputs, so repeated runs are byte-identical.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{Mode, RunConfig, RunLog};
use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::metrics::{step_metrics, voltage_histogram, StepMetrics, ViolationStats};
use crate::tightening::{write_bounds_rows, BOUNDS_HEADER};
use crate::uncertainty::UncertaintyConfig;
use crate::FORMAT_VERSION;

pub const HISTOGRAM_WIDTH: f64 = 0.0025;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub feeder: String,
    /// SHA-256 over the feeder and series inputs.
    pub input_digest: String,
    pub mode: Mode,
    pub seed: u64,
    pub scenarios: usize,
    pub steps: usize,
    pub horizon: usize,
    pub stats: ViolationStats,
    pub socp_losses: f64,
    pub recovered_losses: f64,
    pub max_recovery_gap: f64,
    pub config: SummaryConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryConfig {
    pub solver: crate::socp::SolverConfig,
    pub robust: crate::tightening::RobustConfig,
    pub uncertainty: UncertaintyConfig,
}

pub fn input_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "# format_version={FORMAT_VERSION}")?;
    Ok(f)
}

pub fn write_run(
    dir: impl AsRef<Path>,
    model: &FeederModel,
    cfg: &RunConfig,
    unc: &UncertaintyConfig,
    digest: &str,
    log: &RunLog,
) -> Result<RunSummary> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("voltages"))?;

    let rows = step_metrics(model, log);
    let mut w = csv::WriterBuilder::new().from_writer(create(&dir.join("metrics.csv"))?);
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;

    let mut f = create(&dir.join("steps.csv"))?;
    writeln!(
        f,
        "step,lead,socp_loss,recovered_loss,recovered_gap,socp_slack,recovery_iterations,recovery_converged,recovery_slack,socp_iterations"
    )?;
    for s in &log.steps {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            s.step,
            s.lead,
            s.socp_loss,
            s.recovered_loss,
            s.recovered_gap,
            s.socp_slack,
            s.recovery.iterations,
            s.recovery.converged,
            s.recovery.slack_total,
            s.socp_iterations
        )?;
    }
    f.flush()?;

    let mut f = create(&dir.join("dispatch.csv"))?;
    writeln!(f, "step,der,p_discharge,p_charge,q_battery,p_solar,q_solar,soc")?;
    for s in &log.steps {
        for (d, sp) in s.applied.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                s.step,
                model.ders[d].id,
                sp.p_discharge,
                sp.p_charge,
                sp.q_battery,
                sp.solar.re,
                sp.solar.im,
                s.soc[d]
            )?;
        }
    }
    f.flush()?;

    let mut f = create(&dir.join("bounds.csv"))?;
    writeln!(f, "{BOUNDS_HEADER}")?;
    for s in &log.steps {
        write_bounds_rows(&mut f, model, &s.bounds, s.step, s.lead)?;
    }
    f.flush()?;

    let mut f = create(&dir.join("histogram.csv"))?;
    writeln!(f, "bin_edge,count")?;
    for (edge, count) in voltage_histogram(log, HISTOGRAM_WIDTH) {
        writeln!(f, "{edge},{count}")?;
    }
    f.flush()?;

    let header: Vec<String> = model
        .bus_phases()
        .into_iter()
        .map(|(b, p)| format!("{}.{p}", model.buses[b].id))
        .collect();
    for sc in &log.scenarios {
        let mut f = create(&dir.join("voltages").join(format!("{:04}.csv", sc.index)))?;
        writeln!(f, "step,{}", header.join(","))?;
        for (t, v) in sc.voltages.iter().enumerate() {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(f, "{t},{}", vals.join(","))?;
        }
        f.flush()?;
    }

    let summary = RunSummary {
        format_version: FORMAT_VERSION,
        feeder: model.name.clone(),
        input_digest: digest.to_string(),
        mode: log.mode,
        seed: log.seed,
        scenarios: log.scenarios.len(),
        steps: log.steps.len(),
        horizon: log.horizon,
        stats: ViolationStats::from_rows(&rows),
        socp_losses: log.steps.iter().map(|s| s.socp_loss).sum(),
        recovered_losses: log.steps.iter().map(|s| s.recovered_loss).sum(),
        max_recovery_gap: log.steps.iter().map(|s| s.recovered_gap).fold(0.0, f64::max),
        config: SummaryConfig {
            solver: cfg.solver,
            robust: cfg.robust,
            uncertainty: unc.clone(),
        },
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("summary.json"), text + "\n")?;
    Ok(summary)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::parse("<csv>", format!("{other:?}")),
    }
}

/// Summary and metric rows of a run directory.
pub fn read_run(dir: impl AsRef<Path>) -> Result<(RunSummary, Vec<StepMetrics>)> {
    let dir = dir.as_ref();
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::parse(&path, e))?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    if summary.format_version != FORMAT_VERSION {
        return Err(Error::parse(&path, format!("unsupported format_version {}", summary.format_version)));
    }
    let path = dir.join("metrics.csv");
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(&path)
        .map_err(|e| Error::parse(&path, e))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<StepMetrics>, _>>()
        .map_err(|e| Error::parse(&path, e))?;
    Ok((summary, rows))
}

/// Refuses to pair runs on different inputs or scenario draws.
pub fn check_comparable(a: &RunSummary, b: &RunSummary) -> Result<()> {
    if a.input_digest != b.input_digest {
        return Err(Error::Mismatch("runs use different feeder or series inputs".into()));
    }
    if a.seed != b.seed {
        return Err(Error::Mismatch(format!("seeds differ ({} vs {})", a.seed, b.seed)));
    }
    if a.scenarios != b.scenarios || a.steps != b.steps {
        return Err(Error::Mismatch(format!(
            "shapes differ ({} scenarios x {} steps vs {} x {})",
            a.scenarios, a.steps, b.scenarios, b.steps
        )));
    }
    if a.config.uncertainty != b.config.uncertainty {
        return Err(Error::Mismatch("uncertainty models differ".into()));
    }
    Ok(())
}
