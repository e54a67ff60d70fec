//! Run configuration file (TOML).
//!
//! ```toml
//! [run]
//! mode = "stochastic"
//! horizon = 12
//! steps = 60
//! scenarios = 200
//! seed = 7
//!
//! [solver]
//! scd_penalty = 1e-3
//! slack_penalty = 1e3
//!
//! [robust]
//! alpha_v = 0.1
//! distribution = "unimodal"
//!
//! [uncertainty]
//! family = "uniform"
//! growth = [[0, 0.02], [30, 0.30], [60, 0.58]]
//! refresh_period = 30
//! ```
//!
//! Every section and key is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::socp::SolverConfig;
use crate::tightening::RobustConfig;
use crate::uncertainty::UncertaintyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    pub horizon: usize,
    pub steps: usize,
    pub scenarios: usize,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        let d = RunConfig::default();
        RunSection {
            mode: d.mode,
            horizon: d.horizon,
            steps: d.steps,
            scenarios: d.scenarios,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub run: RunSection,
    pub solver: SolverConfig,
    pub robust: RobustConfig,
    pub uncertainty: UncertaintyConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            mode: self.run.mode,
            horizon: self.run.horizon,
            steps: self.run.steps,
            robust: self.robust,
            solver: self.solver,
            seed: self.run.seed,
            scenarios: self.run.scenarios,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        let c = ConfigFile::parse("").unwrap();
        assert_eq!(c, ConfigFile::default());
    }

    #[test]
    fn sections_parse() {
        let c = ConfigFile::parse(
            "[run]\nmode = \"stochastic\"\nseed = 9\n[robust]\nalpha_v = 0.05\ndistribution = \"gaussian\"\n\
             [uncertainty]\nfamily = \"custom-unimodal\"\ngrowth = [[0, 0.1], [10, 0.2]]\n",
        )
        .unwrap();
        assert_eq!(c.run.mode, Mode::Stochastic);
        assert_eq!(c.run.seed, 9);
        assert_eq!(c.robust.alpha_v, 0.05);
        assert_eq!(c.uncertainty.growth.points, vec![(0.0, 0.1), (10.0, 0.2)]);
        assert!(ConfigFile::parse("[run]\nbogus = 1\n").is_err());
    }
}
