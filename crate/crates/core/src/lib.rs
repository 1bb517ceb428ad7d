//! Relaxed-control mean field games on lattices.
//!
//! The crate discretizes a controlled diffusion into a Markov chain on a
//! [`StateLattice`], solves the representative agent's best response against
//! a frozen population flow (by dynamic programming or as a linear program
//! over occupation measures), and iterates the best-response map with damping
//! until the flow reproduces itself. Relaxed equilibria can be projected onto
//! Markovian and then strict controls, and a linear-quadratic family with a
//! closed-form solution serves as a reference.
//!
//! Module map:
//!
//! - [`measures`]: atomic measures, Wasserstein distances, mixing, mollification.
//! - [`model`]: coefficient evaluators, growth constants, validators.
//! - [`kernel`]: lattices, time grids, transition kernels, control truncation.
//! - [`control`]: best-response solvers and occupation measures.
//! - [`markov`]: Markovian projection, mimicking, strict selection, simulation.
//! - [`fixedpoint`]: the damped equilibrium iteration and the truncation ladder.
//! - [`lq`]: the linear-quadratic reference game.

pub mod control;
pub mod error;
pub mod fixedpoint;
pub mod kernel;
pub mod lq;
pub mod markov;
pub mod measures;
pub mod model;
pub mod shipped;
#[doc(hidden)]
pub mod testing;

pub use control::{
    evaluate_policy, exploitability, objective_eval, occupation_from_policy, solve_dp, solve_lp,
    ControlProblem, DpSolution, LpSolution, OccupationMeasure, RelaxedPolicy, RewardTable,
    StrictPolicy, ValueField,
};
pub use error::{MfgError, Result};
pub use fixedpoint::{
    best_response, detect_oscillation, iterate, truncation_ladder, BestResponse, Damping,
    Discretization, IterationRecord, LadderEntry, LadderReport, SolveConfig, SolveReport,
    SolveStatus, SolverKind, StrictCertificate,
};
pub use kernel::{
    build_kernel, cfl_max_dt, push_forward, resample_flow, truncate_controls, truncation_radius,
    CflPolicy, StateLattice, TimeGrid, TransitionKernel,
};
pub use markov::{
    dump_paths, empirical_marginals, markov_project, simulate, simulate_range, strictify,
    verify_mimicking, FnHistoryPolicy, GapReport, HistoryPolicy, MimickingOptions,
    MimickingReport, PathBundle, PolicyRef, StrictifyOptions,
};
pub use measures::{
    dump_flow, dump_measure, flow_distance, format_float, load_flow, load_measure, mix, moment,
    mollifier_moment, mollify, wasserstein, wasserstein_1d, DiscreteMeasure, MeasureFlow,
};
pub use model::{
    check_combination, check_convexity, validate_growth, Coefficients, ControlSpace,
    ConvexityOptions, ConvexityReport, ConvexityTolerance, ConvexityVerdict, FnCoefficients,
    GrowthConstants, GrowthSample, MfgModel, Population, ValidationReport,
};
