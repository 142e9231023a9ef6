//! Error type shared by every module.

use std::fmt;

/// Where in a time march an error happened, if anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepTag(pub Option<usize>);

impl fmt::Display for StepTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(k) => write!(f, " at time step {k}"),
            None => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("one-sided stencil needs at least 3 nodes, got {0}")]
    InsufficientStencil(usize),
    #[error("singular system{step}: {detail}")]
    Singular { step: StepTag, detail: String },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("admissibility violated: {0}")]
    Admissibility(String),
    #[error("front collapse at time step {step}: q = {q:.6e} <= q* = {q_star:.6e}")]
    FrontCollapse { step: usize, q: f64, q_star: f64 },
    #[error("inner nonlinear iteration stalled at time step {step}: relative update {update:.3e}")]
    Nonlinear { step: usize, update: f64 },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("parameter below admissible threshold: {0}")]
    Threshold(String),
    #[error("terminal data incompatible with the boundary coupling: mismatch {mismatch:.3e}")]
    Compatibility { mismatch: f64 },
    #[error("boundary coupling too strong: update {update:.3e} after {iterations} sweeps, contraction estimate {contraction:.3}")]
    Coupling {
        iterations: usize,
        update: f64,
        contraction: f64,
    },
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("ill-conditioned problem: {0}")]
    Conditioning(String),
    #[error("discretization problem: {0}")]
    Discretization(String),
    #[error("control iteration did not converge: {0}")]
    ControlDivergence(String),
    #[error("source outside the weighted space: {0}")]
    WeightedSource(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("serialization error: {0}")]
    Serialize(String),
    #[error("{module}: {source}")]
    Context {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attach a time-step index to singularity errors raised inside a step solve.
    pub fn at_step(self, k: usize) -> Self {
        match self {
            Error::Singular { detail, .. } => Error::Singular {
                step: StepTag(Some(k)),
                detail,
            },
            other => other,
        }
    }

    /// Tag the error with the module it came from.
    pub fn context(self, module: &'static str) -> Self {
        Error::Context {
            module,
            source: Box::new(self),
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Context { source, .. } => source.exit_code(),
            Error::Config(_) => 2,
            Error::Nonlinear { .. }
            | Error::Coupling { .. }
            | Error::ControlDivergence(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
