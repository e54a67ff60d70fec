//! Drives the command-line front end in-process: a deterministic and a
//! stochastic run on the two-bus feeder, then a paired comparison.

fn main() {
    let out = std::env::temp_dir().join("feeder-opf-example");
    let dir = |m: &str| out.join(m).display().to_string();
    for mode in ["deterministic", "stochastic"] {
        let code = feeder_opf::cli::main_with([
            "feeder-opf", "run", "--feeder", "2bus", "--mode", mode, "--steps", "5", "--scenarios", "20",
            "--seed", "3", "--out", &dir(mode),
        ]);
        assert_eq!(code, 0, "{mode} run failed");
    }
    let code = feeder_opf::cli::main_with(["feeder-opf", "compare", &dir("deterministic"), &dir("stochastic")]);
    std::process::exit(code);
}
