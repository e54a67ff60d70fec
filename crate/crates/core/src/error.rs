use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid feeder: {element}: {message}")]
    Validation { element: String, message: String },

    #[error("network is disconnected; unreachable buses: {}", .0.join(", "))]
    Disconnected(Vec<String>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("load flow did not converge after {sweeps} sweeps (final mismatch {mismatch:.3e})")]
    NonConvergence { sweeps: usize, mismatch: f64 },

    #[error("voltage collapse at {element}: |V| = {magnitude:.4} p.u.")]
    VoltageCollapse { element: String, magnitude: f64 },

    #[error("conic program infeasible{}", .restoring_family.as_ref().map(|f| format!("; relaxing {f} restores feasibility")).unwrap_or_default())]
    Infeasible { restoring_family: Option<String> },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("incompatible runs: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(element: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            element: element.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// The innermost error, with step wrappers removed.
    /// Process exit code of the error class: 2 configuration, 3 input data,
    /// 4 solver, 5 plant load flow.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 2,
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Disconnected(_)
            | Error::Dimension(_)
            | Error::Mismatch(_)
            | Error::Io(_) => 3,
            Error::Infeasible { .. } | Error::Solver(_) => 4,
            Error::NonConvergence { .. } | Error::VoltageCollapse { .. } => 5,
            Error::AtStep { .. } => unreachable!("root is never a step wrapper"),
        }
    }

    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}
