//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration, 3 input data, 4 solver,
//! 5 plant load flow.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::artifacts::{check_comparable, input_digest, read_run, write_run};
use crate::bounds::TightenedBounds;
use crate::config::ConfigFile;
use crate::controller::{run_closed_loop, Mode};
use crate::error::{Error, Result};
use crate::feeder::{parse_feeder, FeederModel};
use crate::loadflow::{solve_loadflow, DerSetpoint, InjectionSet};
use crate::metrics::compare;
use crate::recovery::recover_all;
use crate::series::{parse_series, TimeSeries};
use crate::socp::solve_program;
use crate::tightening::{save_bounds, tighten, SafetyDistribution};
use crate::uncertainty::UncertaintyModel;
use crate::FORMAT_VERSION;

/// Default root for run directories.
pub const OUTPUT_ENV: &str = "FEEDER_OPF_OUT";

const BUILTIN: &[(&str, &str, &str)] = &[
    (
        "2bus",
        include_str!("../fixtures/two_bus.toml"),
        include_str!("../fixtures/two_bus.csv"),
    ),
    (
        "ieee13",
        include_str!("../fixtures/ieee13.toml"),
        include_str!("../fixtures/ieee13_noon.csv"),
    ),
];

#[derive(Debug, Parser)]
#[command(name = "feeder-opf", version, about = "Chance-constrained dispatch on unbalanced radial feeders")]
pub struct Cli {
    /// Print the artifact format version and exit.
    #[arg(long)]
    pub format_version: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the closed loop and write a run directory.
    Run(RunArgs),
    /// Compare two run directories (b relative to a).
    Compare { a: PathBuf, b: PathBuf },
    /// Check a feeder (and optionally a series) and report a flat load flow.
    Validate(InputArgs),
    /// Tighten the bounds of one horizon and write them as CSV.
    TightenOnly(TightenArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Feeder TOML path, or a built-in name (2bus, ieee13).
    #[arg(long)]
    pub feeder: String,
    /// Series CSV path; built-in feeders default to their bundled series.
    #[arg(long)]
    pub series: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Run configuration TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha_v: Option<f64>,
    #[arg(long, value_parser = parse_distribution)]
    pub distribution: Option<SafetyDistribution>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Closed-loop steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub scenarios: Option<usize>,
    /// Run directory; defaults to `$FEEDER_OPF_OUT/<feeder>-<mode>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TightenArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Closed-loop step whose horizon is tightened.
    #[arg(long, default_value_t = 0)]
    pub step: usize,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

impl std::str::FromStr for SafetyDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(SafetyDistribution::Gaussian),
            "chebyshev" => Ok(SafetyDistribution::Chebyshev),
            "unimodal" => Ok(SafetyDistribution::Unimodal),
            other => Err(Error::Config(format!("unknown distribution {other:?}"))),
        }
    }
}

fn parse_distribution(s: &str) -> std::result::Result<SafetyDistribution, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Inputs {
    model: FeederModel,
    series: TimeSeries,
    digest: String,
}

fn load_inputs(args: &InputArgs) -> Result<Inputs> {
    let builtin = BUILTIN.iter().find(|(name, _, _)| *name == args.feeder);
    let (feeder_text, default_series) = match builtin {
        Some((_, f, s)) => (f.to_string(), Some(s.to_string())),
        None => {
            let text = std::fs::read_to_string(&args.feeder).map_err(|e| Error::parse(&args.feeder, e))?;
            (text, None)
        }
    };
    let model = parse_feeder(&feeder_text).map_err(|e| relabel(e, &args.feeder))?;
    let series_text = match (&args.series, default_series) {
        (Some(p), _) => std::fs::read_to_string(p).map_err(|e| Error::parse(p, e))?,
        (None, Some(s)) => s,
        (None, None) => return Err(Error::Config("--series is required for feeder files".into())),
    };
    let series = parse_series(&series_text, &model)?;
    let digest = input_digest(&[feeder_text.as_bytes(), series_text.as_bytes()]);
    Ok(Inputs { model, series, digest })
}

fn relabel(e: Error, path: &str) -> Error {
    match e {
        Error::Parse { message, .. } => Error::parse(path, message),
        other => other,
    }
}

fn load_config(o: &Overrides) -> Result<ConfigFile> {
    let mut c = match &o.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(m) = o.mode {
        c.run.mode = m;
    }
    if let Some(h) = o.horizon {
        c.run.horizon = h;
    }
    if let Some(s) = o.seed {
        c.run.seed = s;
    }
    if let Some(a) = o.alpha_v {
        c.robust.alpha_v = a;
    }
    if let Some(d) = o.distribution {
        c.robust.distribution = d;
    }
    Ok(c)
}

fn output_dir(args: &RunArgs, feeder: &str, mode: Mode, seed: u64) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    let root = std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{feeder}-{mode}-seed{seed}"))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.overrides)?;
    if let Some(s) = args.steps {
        cfg.run.steps = s;
    }
    if let Some(s) = args.scenarios {
        cfg.run.scenarios = s;
    }
    let run = cfg.run_config();
    run.validate()?;
    let inputs = load_inputs(&args.input)?;
    let unc = UncertaintyModel::new(&inputs.model, &inputs.series, cfg.uncertainty.clone())?;
    let log = run_closed_loop(&inputs.model, &inputs.series, &unc, &run)?;
    let dir = output_dir(args, &inputs.model.name, run.mode, run.seed);
    let summary = write_run(&dir, &inputs.model, &run, &cfg.uncertainty, &inputs.digest, &log)?;
    println!(
        "{}: {} steps x {} scenarios, violation rate {:.4}, losses {:.6} p.u.",
        dir.display(),
        summary.steps,
        summary.scenarios,
        summary.stats.violation_rate,
        summary.stats.losses
    );
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path) -> Result<()> {
    let (sa, ra) = read_run(a)?;
    let (sb, rb) = read_run(b)?;
    check_comparable(&sa, &sb)?;
    let c = compare(&ra, &rb)?;
    let report = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "a": { "dir": a.display().to_string(), "mode": sa.mode, "stats": c.a },
        "b": { "dir": b.display().to_string(), "mode": sb.mode, "stats": c.b },
        "delta_losses": c.delta_losses,
        "delta_net_demand": c.delta_net_demand,
        "relative_net_demand_increase": c.relative_net_demand_increase,
        "delta_violation_rate": c.delta_violation_rate,
        "delta_imbalance": c.delta_imbalance,
        "net_demand_rmse": c.net_demand_rmse,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("json value"));
    Ok(())
}

fn cmd_validate(args: &InputArgs) -> Result<()> {
    let inputs = load_inputs(args)?;
    let m = &inputs.model;
    inputs.series.validate(m)?;
    println!(
        "{}: {} buses, {} branches, {} DERs ({} batteries, {} solar), {} steps of {} h",
        m.name,
        m.buses.len(),
        m.branches.len(),
        m.ders.len(),
        m.batteries().count(),
        m.solar_ders().count(),
        inputs.series.steps(),
        inputs.series.dt_hours
    );
    let idle = vec![DerSetpoint::default(); m.ders.len()];
    let state = solve_loadflow(m, &InjectionSet::compose(m, &inputs.series, 0, &idle))?;
    let (lo, hi) = state
        .voltages
        .iter()
        .flat_map(|v| v.iter().map(|x| x.norm()))
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), x| (lo.min(x), hi.max(x)));
    println!(
        "step 0 with idle DERs: {} sweeps, mismatch {:.2e}, |V| in [{lo:.4}, {hi:.4}]",
        state.sweeps, state.mismatch
    );
    Ok(())
}

fn cmd_tighten(args: &TightenArgs) -> Result<()> {
    let cfg = load_config(&args.overrides)?;
    let run = cfg.run_config();
    run.validate()?;
    let inputs = load_inputs(&args.input)?;
    let (model, series) = (&inputs.model, &inputs.series);
    let unc = UncertaintyModel::new(model, series, cfg.uncertainty.clone())?;
    let window = series.window(args.step, run.horizon);
    let plain = TightenedBounds::untightened(model, run.horizon);
    let soc0: Vec<f64> = model
        .ders
        .iter()
        .map(|d| d.battery.map(|b| b.b_init).unwrap_or(0.0))
        .collect();
    let socp = solve_program(model, &window, &plain, &run.solver, &soc0)?;
    let anchor = recover_all(model, &window, &socp, &plain, &run.solver)?;
    let bounds = tighten(model, &window, &anchor, &unc, &run.robust, args.step)?;
    save_bounds(&args.out, model, &bounds, unc.refresh_lead(args.step))?;
    let crossed = bounds.over_tight_steps();
    println!(
        "{}: {} horizon steps, largest voltage margin {:.3e}{}",
        args.out.display(),
        bounds.horizon(),
        bounds
            .steps
            .iter()
            .flat_map(|s| s.voltage.iter().map(|v| v.margin))
            .fold(0.0, f64::max),
        if crossed.is_empty() {
            String::new()
        } else {
            format!(", over-tight at {crossed:?}")
        }
    );
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.format_version {
        println!("{FORMAT_VERSION}");
        return 0;
    }
    let Some(command) = cli.command else {
        eprintln!("no command given; see --help");
        return 2;
    };
    let result = match &command {
        Command::Run(a) => cmd_run(a),
        Command::Compare { a, b } => cmd_compare(a, b),
        Command::Validate(a) => cmd_validate(a),
        Command::TightenOnly(a) => cmd_tighten(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
