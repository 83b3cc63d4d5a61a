use thiserror::Error;

use crate::expr::{EvalError, ParseError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    Lattice(String),

    #[error("level {level} out of range for a lattice with {steps} steps")]
    LevelOutOfRange { level: usize, steps: usize },

    #[error("{0}")]
    Parse(#[from] ParseError),

    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid frozen data: {0}")]
    FrozenData(String),

    #[error("path enumeration refused: {steps} steps exceeds the cap of {cap}; use the stopping-time norm instead")]
    EnumerationCap { steps: usize, cap: usize },

    #[error("contraction condition violated: {0}")]
    Contraction(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("scalar solve failed at level {level}, node {node}: {reason}")]
    ScalarSolve {
        level: usize,
        node: usize,
        reason: String,
    },

    #[error("time step too coarse: dt * C_f = {0} must be < 1")]
    CoarseStep(f64),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
