use mfg_core::MfgError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] MfgError),

    #[error("cannot write output: {0}")]
    Output(String),
}

/// Exit code for a failed run.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_INVALID: i32 = 3;
pub const EXIT_CFL: i32 = 4;

impl CliError {
    /// Short machine-readable kind.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "invalid-config",
            CliError::Output(_) => "output",
            CliError::Core(e) => match e {
                MfgError::CflViolation { .. } => "cfl-violation",
                MfgError::InvalidMeasure(_) => "invalid-measure",
                MfgError::DimensionMismatch { .. } => "dimension-mismatch",
                MfgError::InvalidArgument(_) => "invalid-argument",
                MfgError::TimeGridMismatch(_) => "time-grid-mismatch",
                MfgError::LatticeTooCoarse { .. } => "lattice-too-coarse",
                MfgError::UnsupportedModel(_) => "unsupported-model",
                MfgError::EmptyControlSet { .. } => "empty-control-set",
                MfgError::Parse(_) => "parse",
                MfgError::Io(_) => "io",
                MfgError::NonFinite { .. } => "non-finite-coefficient",
                MfgError::KernelCorrupted(_) => "kernel-corrupted",
                MfgError::EnumerationBudget { .. } => "enumeration-budget",
                MfgError::NonFiniteResidual(_) => "non-finite-residual",
            },
        }
    }

    /// Bad input (config, measure files, parameters) exits 3, a CFL
    /// violation 4, and failures during the computation itself 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_INVALID,
            CliError::Output(_) => EXIT_FAILURE,
            CliError::Core(e) => match e {
                MfgError::CflViolation { .. } => EXIT_CFL,
                MfgError::NonFinite { .. }
                | MfgError::KernelCorrupted(_)
                | MfgError::EnumerationBudget { .. }
                | MfgError::NonFiniteResidual(_) => EXIT_FAILURE,
                _ => EXIT_INVALID,
            },
        }
    }

    /// One JSON object on a single line.
    pub fn json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            exit_code: i32,
            message: String,
        }
        serde_json::to_string(&Line {
            error: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("error line serializes")
    }
}
