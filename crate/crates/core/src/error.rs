use thiserror::Error;

pub type Result<T> = std::result::Result<T, MfgError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MfgError {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time grids differ: {0}")]
    TimeGridMismatch(String),

    #[error("lattice too coarse: cell width {width} exceeds mollifier bandwidth {bandwidth}")]
    LatticeTooCoarse { width: f64, bandwidth: f64 },

    #[error(
        "CFL violation at t={t}, x={x:?}, a={a:?}: dt={dt} exceeds the admissible {max_dt}"
    )]
    CflViolation {
        t: f64,
        x: Vec<f64>,
        a: Vec<f64>,
        dt: f64,
        max_dt: f64,
    },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("non-finite coefficient at t={t}, x={x:?}, a={a:?}")]
    NonFinite { t: f64, x: Vec<f64>, a: Vec<f64> },

    #[error("occupation LP infeasible or unbounded: {0}")]
    KernelCorrupted(String),

    #[error("truncation level n={n} leaves no control atoms (radius {radius}); use a larger n")]
    EmptyControlSet { n: u32, radius: f64 },

    #[error("path enumeration needs {needed} paths, budget is {budget}")]
    EnumerationBudget { needed: u64, budget: u64 },

    #[error("non-finite residual at iteration {0}")]
    NonFiniteResidual(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MfgError {
    fn from(e: std::io::Error) -> Self {
        MfgError::Io(e.to_string())
    }
}
