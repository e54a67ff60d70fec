#![allow(dead_code)]

use feeder_opf::feeder::{load_feeder, FeederModel};
use feeder_opf::series::{load_series, TimeSeries};

pub const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

pub fn two_bus() -> (FeederModel, TimeSeries) {
    let m = load_feeder(format!("{FIXTURES}/two_bus.toml")).unwrap();
    let s = load_series(format!("{FIXTURES}/two_bus.csv"), &m).unwrap();
    (m, s)
}

pub fn ieee13() -> (FeederModel, TimeSeries) {
    let m = load_feeder(format!("{FIXTURES}/ieee13.toml")).unwrap();
    let s = load_series(format!("{FIXTURES}/ieee13_noon.csv"), &m).unwrap();
    (m, s)
}

pub fn initial_soc(model: &FeederModel) -> Vec<f64> {
    model
        .ders
        .iter()
        .map(|d| d.battery.map(|b| b.b_init).unwrap_or(0.0))
        .collect()
}
