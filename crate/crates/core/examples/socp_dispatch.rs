//! Multi-period convex dispatch of the two-bus battery over a 30-minute
//! horizon, printing the schedule, the SoC trajectory and the per-step
//! relaxation gap.

use feeder_opf::bounds::TightenedBounds;
use feeder_opf::feeder::load_feeder;
use feeder_opf::series::load_series;
use feeder_opf::socp::{build_program, solve_program, SolverConfig};

fn main() -> feeder_opf::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    let model = load_feeder(format!("{dir}/two_bus.toml"))?;
    let series = load_series(format!("{dir}/two_bus.csv"), &model)?.window(0, 30);
    let bounds = TightenedBounds::untightened(&model, series.steps());
    let cfg = SolverConfig::default();

    let program = build_program(&model, &series, &bounds, &cfg)?;
    let dims = program.program.dims();
    println!(
        "{} variables, {} equalities, {} inequalities, {} cones",
        dims.vars,
        dims.zero_rows,
        dims.nonneg_rows,
        dims.soc_sizes.len()
    );

    let soc0: Vec<f64> = model.ders.iter().map(|d| d.battery.map(|b| b.b_init).unwrap_or(0.0)).collect();
    let sol = solve_program(&model, &series, &bounds, &cfg, &soc0)?;
    println!("status {:?}, objective {:.6e}, {} iterations", sol.status, sol.objective, sol.iterations);
    println!(" t      P^d      P^c      q^b      SoC     loss      gap");
    for t in 0..series.steps() {
        let sp = sol.schedule.setpoints[t][0];
        println!(
            "{t:2} {:8.5} {:8.5} {:8.5} {:8.5} {:8.2e} {:8.1e}",
            sp.p_discharge,
            sp.p_charge,
            sp.q_battery,
            sol.schedule.soc[0][t + 1],
            sol.step_losses[t],
            sol.relaxation_gap[t]
        );
    }
    Ok(())
}
