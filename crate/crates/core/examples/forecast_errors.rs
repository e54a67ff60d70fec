//! Forecast error model: half-width growth with lead time, the refresh
//! schedule, and sample statistics of seeded realizations.

use feeder_opf::feeder::load_feeder;
use feeder_opf::series::load_series;
use feeder_opf::uncertainty::{ErrorFamily, UncertaintyConfig, UncertaintyModel};

fn main() -> feeder_opf::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    let model = load_feeder(format!("{dir}/ieee13.toml"))?;
    let series = load_series(format!("{dir}/ieee13_noon.csv"), &model)?;

    for family in [ErrorFamily::Uniform, ErrorFamily::Gaussian, ErrorFamily::CustomUnimodal] {
        let cfg = UncertaintyConfig {
            family,
            ..UncertaintyConfig::default()
        };
        let unc = UncertaintyModel::new(&model, &series, cfg)?;
        let first = &unc.injections[0];
        let e = unc.half_widths(&series, 29, 29)[0];
        let n = 4000;
        let draws: Vec<f64> = (0..n)
            .map(|s| unc.sample_realization(&series, 30, 11, s).errors[29][0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        println!(
            "{family:?} at bus {} {} {:?}: half-width {e:.4}, variance {:.3e} (model {:.3e}), mean {mean:+.1e}",
            model.buses[first.bus].id,
            first.phase,
            first.quantity,
            var,
            family.variance(e)
        );
    }

    let unc = UncertaintyModel::new(&model, &series, UncertaintyConfig::default())?;
    let leads: Vec<usize> = (0..70).step_by(5).map(|t| unc.refresh_lead(t)).collect();
    println!("lead at t = 0, 5, .., 65: {leads:?}");
    Ok(())
}
