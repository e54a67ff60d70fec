//! Deterministic versus chance-constrained receding-horizon dispatch on the
//! stressed 13-bus noon case, with Monte-Carlo plant realizations.
//!
//! ```text
//! cargo run --release --example closed_loop -- [steps] [scenarios]
//! ```

use std::time::Instant;

use feeder_opf::controller::{run_closed_loop, Mode, RunConfig};
use feeder_opf::feeder::load_feeder;
use feeder_opf::metrics::{compare, step_metrics};
use feeder_opf::series::load_series;
use feeder_opf::uncertainty::{UncertaintyConfig, UncertaintyModel};

fn main() -> feeder_opf::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let steps = args.next().unwrap_or(60);
    let scenarios = args.next().unwrap_or(50);

    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    let model = load_feeder(format!("{dir}/ieee13.toml"))?;
    let series = load_series(format!("{dir}/ieee13_noon.csv"), &model)?;
    let unc = UncertaintyModel::new(&model, &series, UncertaintyConfig::default())?;

    let mut logs = Vec::new();
    for mode in [Mode::Deterministic, Mode::Stochastic] {
        let cfg = RunConfig {
            mode,
            horizon: 12,
            steps,
            scenarios,
            seed: 7,
            ..RunConfig::default()
        };
        let start = Instant::now();
        let log = run_closed_loop(&model, &series, &unc, &cfg)?;
        println!("{mode}: {:.1} s", start.elapsed().as_secs_f64());
        logs.push(step_metrics(&model, &log));
    }

    let c = compare(&logs[0], &logs[1])?;
    println!(
        "violation rate  deterministic {:.4}  stochastic {:.4}",
        c.a.violation_rate, c.b.violation_rate
    );
    println!("losses          deterministic {:.4}  stochastic {:.4}", c.a.losses, c.b.losses);
    println!(
        "net demand +{:.3}%  rmse {:.5} p.u.  imbalance {:.5} -> {:.5}",
        100.0 * c.relative_net_demand_increase,
        c.net_demand_rmse,
        c.a.mean_imbalance,
        c.b.mean_imbalance
    );
    Ok(())
}
