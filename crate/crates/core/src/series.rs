//! Demand and solar forecasts per bus, phase and step.
//!
//! Columnar text format:
//!
//! ```text
//! # format_version=1
//! # dt_hours=0.0166666666666667
//! bus,phase,quantity,t0,t1,...
//! 632,a,p_demand,0.12,0.12,...
//! 632,a,q_demand,0.05,0.05,...
//! 675,b,p_solar,0.30,0.31,...
//! ```
//!
//! Values are per-unit. Rows that are absent are zero.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::linalg::{c64, C64};
use crate::phase::Phase;

pub const SERIES_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub dt_hours: f64,
    steps: usize,
    /// `[bus][phase][step]`
    demand: Vec<[Vec<C64>; 3]>,
    /// Available solar real power, `[bus][phase][step]`.
    solar: Vec<[Vec<f64>; 3]>,
}

impl TimeSeries {
    /// All-zero series for `n_buses` buses.
    pub fn zeros(n_buses: usize, steps: usize, dt_hours: f64) -> Self {
        TimeSeries {
            dt_hours,
            steps,
            demand: (0..n_buses)
                .map(|_| std::array::from_fn(|_| vec![C64::default(); steps]))
                .collect(),
            solar: (0..n_buses)
                .map(|_| std::array::from_fn(|_| vec![0.0; steps]))
                .collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn n_buses(&self) -> usize {
        self.demand.len()
    }

    pub fn demand(&self, bus: usize, phase: Phase, t: usize) -> C64 {
        self.demand[bus][phase.index()][t]
    }

    pub fn solar(&self, bus: usize, phase: Phase, t: usize) -> f64 {
        self.solar[bus][phase.index()][t]
    }

    pub fn set_demand(&mut self, bus: usize, phase: Phase, t: usize, s: C64) {
        self.demand[bus][phase.index()][t] = s;
    }

    pub fn set_solar(&mut self, bus: usize, phase: Phase, t: usize, p: f64) {
        self.solar[bus][phase.index()][t] = p;
    }

    /// `len` steps starting at `start`; steps past the end repeat the last
    /// value (persistence forecast).
    pub fn window(&self, start: usize, len: usize) -> TimeSeries {
        let last = self.steps.saturating_sub(1);
        let pick = |t: usize| (start + t).min(last);
        TimeSeries {
            dt_hours: self.dt_hours,
            steps: len,
            demand: self
                .demand
                .iter()
                .map(|ph| std::array::from_fn(|k| (0..len).map(|t| ph[k][pick(t)]).collect()))
                .collect(),
            solar: self
                .solar
                .iter()
                .map(|ph| std::array::from_fn(|k| (0..len).map(|t| ph[k][pick(t)]).collect()))
                .collect(),
        }
    }

    /// Checks that the series matches `model` and only loads present phases.
    pub fn validate(&self, model: &FeederModel) -> Result<()> {
        if !(self.dt_hours > 0.0) {
            return Err(Error::validation("series", "dt_hours must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::validation("series", "empty horizon"));
        }
        if self.n_buses() != model.buses.len() {
            return Err(Error::Dimension(format!(
                "series covers {} buses, feeder has {}",
                self.n_buses(),
                model.buses.len()
            )));
        }
        for (b, bus) in model.buses.iter().enumerate() {
            for p in Phase::ALL {
                let k = p.index();
                let any = self.demand[b][k].iter().any(|s| *s != C64::default())
                    || self.solar[b][k].iter().any(|s| *s != 0.0);
                if any && !bus.phases.contains(p) {
                    return Err(Error::validation(
                        format!("series bus {}", bus.id),
                        format!("data on absent phase {p}"),
                    ));
                }
                if any && b == model.slack_bus {
                    return Err(Error::validation(
                        format!("series bus {}", bus.id),
                        "injections at the slack bus are not modelled",
                    ));
                }
                if self.solar[b][k].iter().any(|s| !(s.is_finite() && *s >= 0.0))
                    || self.demand[b][k].iter().any(|s| !(s.re.is_finite() && s.im.is_finite()))
                {
                    return Err(Error::validation(
                        format!("series bus {}", bus.id),
                        "non-finite or negative entries",
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn load_series(path: impl AsRef<Path>, model: &FeederModel) -> Result<TimeSeries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::parse(path, e))?;
    parse_series(&text, model).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path, message),
        other => other,
    })
}

pub fn parse_series(text: &str, model: &FeederModel) -> Result<TimeSeries> {
    let bad = |msg: String| Error::parse("<series>", msg);
    let mut version = None;
    let mut dt_hours = None;
    let mut body = String::new();
    for line in text.lines() {
        if let Some(meta) = line.trim().strip_prefix('#') {
            for pair in meta.split_whitespace() {
                if let Some((key, value)) = pair.split_once('=') {
                    match key {
                        "format_version" => {
                            version = Some(value.parse::<u32>().map_err(|e| bad(e.to_string()))?)
                        }
                        "dt_hours" => {
                            dt_hours = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?)
                        }
                        _ => {}
                    }
                }
            }
        } else if !line.trim().is_empty() {
            body.push_str(line);
            body.push('\n');
        }
    }
    match version {
        Some(SERIES_FORMAT_VERSION) => {}
        Some(v) => return Err(bad(format!("unsupported format_version {v}"))),
        None => return Err(bad("missing '# format_version=' line".into())),
    }
    let dt_hours = dt_hours.ok_or_else(|| bad("missing '# dt_hours=' line".into()))?;

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.len() < 4 || &headers[0] != "bus" || &headers[1] != "phase" || &headers[2] != "quantity" {
        return Err(bad("header must be bus,phase,quantity,t0,...".into()));
    }
    let steps = headers.len() - 3;
    let mut series = TimeSeries::zeros(model.buses.len(), steps, dt_hours);
    let mut q_rows = Vec::new();

    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(format!("row {}: {e}", row + 1)))?;
        let bus = model
            .bus_index(&record[0])
            .ok_or_else(|| bad(format!("row {}: unknown bus '{}'", row + 1, &record[0])))?;
        let phase: Phase = record[1].parse().map_err(|e: String| bad(format!("row {}: {e}", row + 1)))?;
        let values = record
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("row {}: {e}", row + 1)))?;
        let k = phase.index();
        match &record[2] {
            "p_demand" => {
                for (t, v) in values.into_iter().enumerate() {
                    series.demand[bus][k][t].re = v;
                }
            }
            "q_demand" => q_rows.push((bus, k, values)),
            "p_solar" => series.solar[bus][k] = values,
            other => return Err(bad(format!("row {}: unknown quantity '{other}'", row + 1))),
        }
    }
    for (bus, k, values) in q_rows {
        for (t, v) in values.into_iter().enumerate() {
            series.demand[bus][k][t].im = v;
        }
    }
    series.validate(model)?;
    Ok(series)
}

pub fn save_series(series: &TimeSeries, model: &FeederModel, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "# format_version={SERIES_FORMAT_VERSION}")?;
    writeln!(out, "# dt_hours={}", series.dt_hours)?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["bus".to_string(), "phase".into(), "quantity".into()];
        header.extend((0..series.steps).map(|t| format!("t{t}")));
        w.write_record(&header).map_err(csv_io)?;
        for (b, bus) in model.buses.iter().enumerate() {
            for p in bus.phases.iter() {
                let k = p.index();
                let rows: [(&str, Vec<f64>); 3] = [
                    ("p_demand", series.demand[b][k].iter().map(|s| s.re).collect()),
                    ("q_demand", series.demand[b][k].iter().map(|s| s.im).collect()),
                    ("p_solar", series.solar[b][k].clone()),
                ];
                for (quantity, values) in rows {
                    if values.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let mut rec = vec![bus.id.clone(), p.to_string(), quantity.to_string()];
                    rec.extend(values.iter().map(|v| v.to_string()));
                    w.write_record(&rec).map_err(csv_io)?;
                }
            }
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Convenience for building per-unit loads.
pub fn pq(p: f64, q: f64) -> C64 {
    c64(p, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::tests::{bus, line};

    fn model() -> FeederModel {
        FeederModel::new(
            "two",
            1.0,
            1.0,
            0,
            None,
            vec![bus("1", "ab"), bus("2", "ab")],
            vec![line("l", 0, 1, "ab", (0.01, 0.02))],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn parse_round_trip() {
        let m = model();
        let text = "# format_version=1\n# dt_hours=0.5\nbus,phase,quantity,t0,t1\n2,a,p_demand,0.5,0.4\n2,a,q_demand,0.1,0.1\n2,b,p_solar,0.0,0.2\n";
        let s = parse_series(text, &m).unwrap();
        assert_eq!(s.steps(), 2);
        assert_eq!(s.demand(1, Phase::A, 0), c64(0.5, 0.1));
        assert_eq!(s.solar(1, Phase::B, 1), 0.2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        save_series(&s, &m, &path).unwrap();
        assert_eq!(load_series(&path, &m).unwrap(), s);
    }

    #[test]
    fn rejects_absent_phase_and_missing_meta() {
        let m = model();
        let text = "# format_version=1\n# dt_hours=0.5\nbus,phase,quantity,t0\n2,c,p_demand,0.5\n";
        assert!(parse_series(text, &m).unwrap_err().to_string().contains("absent phase"));
        let text = "bus,phase,quantity,t0\n2,a,p_demand,0.5\n";
        assert!(parse_series(text, &m).unwrap_err().to_string().contains("format_version"));
    }

    #[test]
    fn window_holds_last_value() {
        let m = model();
        let mut s = TimeSeries::zeros(2, 3, 1.0);
        for t in 0..3 {
            s.set_solar(1, Phase::A, t, t as f64);
        }
        s.validate(&m).unwrap();
        let w = s.window(1, 4);
        let got: Vec<f64> = (0..4).map(|t| w.solar(1, Phase::A, t)).collect();
        assert_eq!(got, vec![1.0, 2.0, 2.0, 2.0]);
    }
}
