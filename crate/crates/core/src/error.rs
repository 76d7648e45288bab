use thiserror::Error;

/// Errors raised by kernel construction, gain assembly and simulation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("diffusion coefficient must be positive, got {0}")]
    NonPositiveDiffusion(f64),

    #[error("invalid parameter `{name}`: {detail}")]
    InvalidParameter { name: &'static str, detail: String },

    /// The reaction series carries a nonzero coefficient on an odd power.
    /// The kernel coefficient system is then incompatible for large degrees.
    #[error("reaction coefficient of r^{index} is {value:e}; only even powers are admissible")]
    EvennessViolation { index: usize, value: f64 },

    #[error("estimated radius of convergence {0} does not cover the unit ball")]
    InsufficientConvergenceRadius(f64),

    #[error("{what} outside its domain: {detail}")]
    DomainViolation { what: &'static str, detail: String },

    #[error("truncation order {order} exceeds the configured cap {cap}")]
    OrderOverflow { order: usize, cap: usize },

    #[error("grid mismatch: expected {expected} nodes, found {found}")]
    GridMismatch { expected: usize, found: usize },

    #[error("linear solve failed: {0}")]
    LinearSolveFailure(String),

    #[error("no kernel available for controlled degree l = {0}")]
    MissingKernel(usize),

    #[error("band limit mismatch: {0}")]
    BandLimitMismatch(String),

    #[error("angular grid cannot resolve band limit: {0}")]
    UnderResolvedGrid(String),

    #[error("malformed input: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
