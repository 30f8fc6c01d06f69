use thiserror::Error;

use crate::netsim::Phase;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("wrong noise case: expected {expected}, found {found}")]
    NoiseCase {
        expected: &'static str,
        found: &'static str,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("local subproblem of subsystem {subsystem} is infeasible")]
    LocalInfeasible { subsystem: usize },

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error("locality constraints admit no achievable response: {0}")]
    NotLocalizable(String),

    #[error(
        "ADMM did not converge after {iterations} iterations \
         (primal {primal:.3e}, dual {dual:.3e})"
    )]
    NotConverged {
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("QP solver stopped without an optimal point: {0}")]
    Solver(String),

    #[error(
        "topology violation in {phase:?}: {sender} -> {receiver} \
         ({hops} hops, limit {limit})"
    )]
    Topology {
        phase: Phase,
        sender: usize,
        receiver: usize,
        hops: Hops,
        limit: usize,
    },

    #[error("vertex count {count} exceeds cap {cap}")]
    VertexCap { count: u128, cap: u128 },

    #[error("time step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hop distance used in topology errors; `Unreachable` when no path exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hops {
    Finite(usize),
    Unreachable,
}

impl std::fmt::Display for Hops {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Hops::Finite(h) => write!(f, "{h}"),
            Hops::Unreachable => write!(f, "unreachable"),
        }
    }
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// Innermost error, unwrapping time-step context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }
}
