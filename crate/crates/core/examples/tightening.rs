//! Chance-constraint tightening of one 12-step horizon on the 13-bus noon
//! case: safety factors, and the voltage margin of the most exposed bus
//! phase as the forecast lead grows.

use feeder_opf::bounds::TightenedBounds;
use feeder_opf::feeder::load_feeder;
use feeder_opf::recovery::recover_all;
use feeder_opf::series::load_series;
use feeder_opf::socp::{solve_program, SolverConfig};
use feeder_opf::tightening::{safety_factor, tighten, RobustConfig, SafetyDistribution};
use feeder_opf::uncertainty::{UncertaintyConfig, UncertaintyModel};

fn main() -> feeder_opf::Result<()> {
    for alpha in [0.01, 0.05, 0.10, 0.20] {
        let f = |d| safety_factor(d, alpha);
        println!(
            "alpha {alpha:.2}: gaussian {:.4}  unimodal {:.4}  chebyshev {:.4}",
            f(SafetyDistribution::Gaussian)?,
            f(SafetyDistribution::Unimodal)?,
            f(SafetyDistribution::Chebyshev)?
        );
    }

    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    let model = load_feeder(format!("{dir}/ieee13.toml"))?;
    let series = load_series(format!("{dir}/ieee13_noon.csv"), &model)?;
    let unc = UncertaintyModel::new(&model, &series, UncertaintyConfig::default())?;
    let t0 = 20;
    let window = series.window(t0, 12);
    let plain = TightenedBounds::untightened(&model, 12);
    let cfg = SolverConfig::default();
    let soc0: Vec<f64> = model.ders.iter().map(|d| d.battery.map(|b| b.b_init).unwrap_or(0.0)).collect();
    let socp = solve_program(&model, &window, &plain, &cfg, &soc0)?;
    let anchor = recover_all(&model, &window, &socp, &plain, &cfg)?;
    let bounds = tighten(&model, &window, &anchor, &unc, &RobustConfig::default(), t0)?;

    let rows = model.bus_phases();
    let worst = (0..rows.len())
        .max_by(|&a, &b| bounds.steps[0].voltage[a].margin.total_cmp(&bounds.steps[0].voltage[b].margin))
        .expect("voltage rows");
    let (bus, phase) = rows[worst];
    println!("bus {} phase {phase}:", model.buses[bus].id);
    for (k, s) in bounds.steps.iter().enumerate() {
        let v = s.voltage[worst];
        println!(
            "  lead {:2}  lambda {:.5}  |V| window [{:.4}, {:.4}]",
            unc.refresh_lead(t0) + k,
            v.margin,
            v.lower.sqrt(),
            v.upper.max(0.0).sqrt()
        );
    }
    Ok(())
}
