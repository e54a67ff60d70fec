//! Plant load flow on the 13-bus feeder at the first noon step with all
//! DERs idle.

use feeder_opf::feeder::load_feeder;
use feeder_opf::loadflow::{compute_losses, solve_loadflow, DerSetpoint, InjectionSet};
use feeder_opf::series::load_series;

fn main() -> feeder_opf::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    let model = load_feeder(format!("{dir}/ieee13.toml"))?;
    let series = load_series(format!("{dir}/ieee13_noon.csv"), &model)?;

    let idle = vec![DerSetpoint::default(); model.ders.len()];
    let inj = InjectionSet::compose(&model, &series, 0, &idle);
    let state = solve_loadflow(&model, &inj)?;

    println!("converged in {} sweeps, mismatch {:.2e}", state.sweeps, state.mismatch);
    for (b, bus) in model.buses.iter().enumerate() {
        let mags: Vec<String> = state.voltages[b].iter().map(|v| format!("{:.4}", v.norm())).collect();
        println!("{:>4} {:<3} {}", bus.id, bus.phases.to_string(), mags.join(" "));
    }
    println!("losses {:.5} p.u.", compute_losses(&model, &state.lifted(&model)));
    Ok(())
}
