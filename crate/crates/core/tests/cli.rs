use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feeder-opf"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FEEDER_OPF_OUT")
        .output()
        .unwrap()
}

fn run(cwd: &Path, out: &str, seed: &str, mode: &str) -> Output {
    cli(
        &["run", "--feeder", "2bus", "--steps", "3", "--scenarios", "2", "--horizon", "3", "--seed", seed, "--mode", mode, "--out", out],
        cwd,
    )
}

#[test]
fn format_version_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["--format-version"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1");
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["run", "--feeder", "2bus", "--alpha-v", "0.6", "--steps", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = cli(&["validate", "--feeder", "missing.toml", "--series", "missing.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let out = cli(&["run", "--feeder", "2bus", "--mode", "sideways"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validate_accepts_builtin_feeders() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["2bus", "ieee13"] {
        let out = cli(&["validate", "--feeder", name], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn runs_are_byte_reproducible_and_compare_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["a", "b"] {
        assert_eq!(run(p, out, "3", "stochastic").status.code(), Some(0));
    }
    for file in ["summary.json", "metrics.csv", "dispatch.csv", "bounds.csv", "voltages/0001.csv"] {
        let a = std::fs::read(p.join("a").join(file)).unwrap();
        let b = std::fs::read(p.join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let head = std::fs::read_to_string(p.join("a/metrics.csv")).unwrap();
    assert!(head.starts_with("# format_version=1\n"));

    let out = cli(&["compare", "a", "b"], p);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["delta_losses", "delta_net_demand", "delta_violation_rate", "net_demand_rmse"] {
        assert_eq!(report[key].as_f64(), Some(0.0), "{key}");
    }

    assert_eq!(run(p, "d", "3", "deterministic").status.code(), Some(0));
    let out = cli(&["compare", "d", "a"], p);
    assert_eq!(out.status.code(), Some(0));

    assert_eq!(run(p, "c", "4", "stochastic").status.code(), Some(0));
    let out = cli(&["compare", "a", "c"], p);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_feeder-opf"))
        .args(["run", "--feeder", "2bus", "--steps", "1", "--horizon", "2"])
        .current_dir(dir.path())
        .env("FEEDER_OPF_OUT", dir.path().join("root"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("root/two_bus-deterministic-seed1/summary.json").exists());
}

#[test]
fn tighten_only_writes_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["tighten-only", "--feeder", "ieee13", "--step", "20", "--horizon", "4", "--out", "b.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    assert!(lines.next().unwrap().starts_with("step,horizon_step,lead"));
    assert!(lines.count() > 0);
}
