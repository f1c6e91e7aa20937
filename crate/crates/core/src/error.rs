use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid dimension {0}: expected 1, 2 or 3")]
    InvalidDimension(usize),
    #[error("invalid resolution: {0}")]
    InvalidResolution(String),
    #[error("non-finite value at node {node}")]
    NonFiniteValue { node: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("kernel half-width {kernel} exceeds grid half-width {grid}")]
    KernelTooWide { kernel: f64, grid: f64 },
    #[error("negative radius {0}")]
    NegativeRadius(f64),
    #[error("unsupported dimension {0} for this operation (needs 2 or 3)")]
    UnsupportedDimension(usize),
    #[error("invalid time step: {0}")]
    InvalidTimeStep(String),
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("mollifier width {epsilon} under-resolved: need at least 2h = {min}")]
    MollifierUnderResolved { epsilon: f64, min: f64 },
    #[error("unstable step: dt_pde = {dt} exceeds h^2/(4 dim) = {max}")]
    UnstableStep { dt: f64, max: f64 },
    #[error("non-positive total mass {0}")]
    NonPositiveMass(f64),
    #[error("density not normalized: mass {0}")]
    NotNormalized(f64),
    #[error("line search made no progress after {iterations} iterations")]
    NoProgress { iterations: usize },
    #[error("tilt is positive at node {node} (value {value})")]
    PositiveTilt { node: usize, value: f64 },
    #[error("objective diverged: {0}")]
    DivergedObjective(String),
    #[error("hard wall excludes the support of the initial distribution")]
    InfeasibleTrap,
    #[error("no convergence after {sweeps} sweeps (last change {last_change:e})")]
    NonConvergent { sweeps: usize, last_change: f64 },
    #[error("every replica weight is zero")]
    AllWeightsZero,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
