//! The equilibrium driver: damped best-response iteration on measure flows.
//!
//! Each iteration freezes the current flow `μᵏ`, solves the representative
//! agent's problem against it, and mixes the induced flow `Φ(μᵏ)` back in.
//! The averaged occupation measure is carried alongside the flow (its state
//! marginals *are* the flow), so its Markovian projection is a natural
//! candidate policy whose exploitability is recorded every iteration.
//!
//! Non-convergence is a diagnosis, not a proof: the status distinguishes an
//! exhausted budget from stagnating residuals under constant damping.

use crate::control::{
    occupation_from_policy, solve_dp, solve_lp, ControlProblem, OccupationMeasure, RelaxedPolicy,
    RewardTable, StrictPolicy,
};
use crate::error::{MfgError, Result};
use crate::kernel::{build_kernel, truncate_controls, truncation_radius, CflPolicy, StateLattice, TimeGrid, TransitionKernel};
use crate::markov::{markov_project, strictify, GapReport, StrictifyOptions};
use crate::measures::{flow_distance, moment, MeasureFlow};
use crate::model::{check_convexity, ConvexityOptions, ConvexityReport, ConvexityTolerance, ConvexityVerdict, MfgModel};

/// Where the game is discretized.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub lattice: StateLattice,
    pub grid: TimeGrid,
    pub cfl: CflPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damping {
    /// `μᵏ⁺¹ = (1 − ω) μᵏ + ω Φ(μᵏ)` with a fixed `ω ∈ (0, 1]`.
    Constant(f64),
    /// `ωₖ = 1/(k + 1)` from `k = 0`: the first step replaces the initial flow,
    /// after which the iterate is the running average of all best responses.
    FictitiousPlay,
}

impl Damping {
    fn weight(self, iter: usize) -> f64 {
        match self {
            Damping::Constant(w) => w,
            Damping::FictitiousPlay => 1.0 / (iter as f64 + 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Lp,
    Dp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub damping: Damping,
    /// Threshold on the flow residual `flow_distance(μᵏ, Φ(μᵏ), p)`.
    pub tol: f64,
    pub max_iter: usize,
    pub solver: SolverKind,
    /// Wasserstein order of the residual.
    pub p: f64,
    pub seed: u64,
    /// Exploitability threshold; `tol · (1 + |value|)` when unset.
    pub tol_exploitability: Option<f64>,
    /// Strictify the converged policy when the control set is flagged convex.
    pub strictify: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            damping: Damping::FictitiousPlay,
            tol: 1e-4,
            max_iter: 500,
            solver: SolverKind::Dp,
            p: 1.0,
            seed: 0,
            tol_exploitability: None,
            strictify: true,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(MfgError::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(MfgError::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.p >= 1.0) || !self.p.is_finite() {
            return Err(MfgError::InvalidArgument(format!("p must be at least 1, got {}", self.p)));
        }
        if let Damping::Constant(w) = self.damping {
            if !(w > 0.0 && w <= 1.0) {
                return Err(MfgError::InvalidArgument(format!("damping {w} outside (0, 1]")));
            }
        }
        if let Some(t) = self.tol_exploitability {
            if !(t > 0.0) {
                return Err(MfgError::InvalidArgument(format!(
                    "exploitability tolerance must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }

    fn exploitability_tolerance(&self, value: f64) -> f64 {
        self.tol_exploitability.unwrap_or(self.tol * (1.0 + value.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    BudgetExhausted,
    Oscillating,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "CONVERGED",
            SolveStatus::BudgetExhausted => "BUDGET_EXHAUSTED",
            SolveStatus::Oscillating => "OSCILLATING",
        }
    }
}

/// One row of the iteration trace, all measured at the iterate `μᵏ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub flow_residual: f64,
    /// Best-response value minus the value of the projected averaged policy.
    pub exploitability: f64,
    /// Best-response value against `μᵏ`.
    pub value: f64,
    /// First coordinate of the mean of `μᵏ_T`.
    pub mean_terminal: f64,
}

/// A strict Markov policy extracted from a converged relaxed equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct StrictCertificate {
    pub policy: StrictPolicy,
    pub gaps: GapReport,
    /// `flow_distance` between the equilibrium flow and the strict policy's flow.
    pub flow_distance: f64,
    /// `tol + T·(drift mismatch) + √(T·(diffusion mismatch))`.
    pub bound: f64,
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: Vec<IterationRecord>,
    pub final_flow: MeasureFlow,
    pub final_policy: RelaxedPolicy,
    pub value: f64,
    pub strict: Option<StrictCertificate>,
    pub convexity: Option<ConvexityReport>,
}

impl SolveReport {
    pub fn last(&self) -> &IterationRecord {
        self.iterations.last().expect("at least one iteration")
    }

    pub fn min_residual(&self) -> f64 {
        self.iterations.iter().map(|r| r.flow_residual).fold(f64::INFINITY, f64::min)
    }
}

/// The output of one application of the best-response map.
#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    pub flow: MeasureFlow,
    pub occupation: OccupationMeasure,
    pub value: f64,
    pub policy: RelaxedPolicy,
}

fn flow_from_dense(lattice: &StateLattice, times: &[f64], dense: &[Vec<f64>]) -> Result<MeasureFlow> {
    let marginals = dense
        .iter()
        .map(|m| lattice.measure_from_dense(m))
        .collect::<Result<Vec<_>>>()?;
    MeasureFlow::new(times.to_vec(), marginals)
}

fn flow_from_occupation(lattice: &StateLattice, times: &[f64], occ: &OccupationMeasure) -> Result<MeasureFlow> {
    let dense: Vec<Vec<f64>> = (0..=occ.steps()).map(|k| occ.state_marginal(k)).collect();
    flow_from_dense(lattice, times, &dense)
}

/// A best response in the form the mixing step needs.
enum Response {
    Strict(StrictPolicy),
    Occupation(OccupationMeasure),
}

/// State marginals `ρ_0..ρ_N` of a strict policy started from `initial`.
fn strict_marginals(kernel: &TransitionKernel, policy: &StrictPolicy, initial: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(kernel.steps() + 1);
    out.push(initial.to_vec());
    for k in 0..kernel.steps() {
        let mut next = vec![0.0; kernel.nodes()];
        for (i, &m) in out[k].iter().enumerate() {
            if m != 0.0 {
                kernel.scatter(k, i, policy.action(k, i), m, &mut next);
            }
        }
        out.push(next);
    }
    out
}

/// Value of [`admissible_projection`]`(occ)` under `problem`, by a forward
/// rollout that never materializes the projected policy.
fn projected_value(occ: &OccupationMeasure, problem: &ControlProblem<'_>) -> Result<f64> {
    let kernel = problem.kernel();
    let rewards = problem.rewards();
    let (steps, nodes, atoms) = (kernel.steps(), kernel.nodes(), kernel.atoms());
    let mut rho = problem.initial().to_vec();
    let mut next = vec![0.0; nodes];
    let mut value = 0.0;
    for k in 0..steps {
        next.fill(0.0);
        let weights = occ.weights(k);
        for (i, &m) in rho.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let row = &weights[i * atoms..(i + 1) * atoms];
            let mut total = 0.0;
            let mut usable = true;
            for (j, &w) in row.iter().enumerate() {
                if w > 0.0 {
                    total += w;
                    usable &= kernel.is_admissible(k, i, j);
                }
            }
            if total > 0.0 && usable {
                for (j, &w) in row.iter().enumerate() {
                    if w > 0.0 {
                        let mass = m * (w / total);
                        value += mass * rewards.running(k, i, j);
                        kernel.scatter(k, i, j, mass, &mut next);
                    }
                }
            } else {
                let j = kernel.first_admissible(k, i).ok_or_else(|| {
                    MfgError::KernelCorrupted(format!("no admissible control at step {k}, node {i}"))
                })?;
                value += m * rewards.running(k, i, j);
                kernel.scatter(k, i, j, m, &mut next);
            }
        }
        std::mem::swap(&mut rho, &mut next);
    }
    Ok(value + rho.iter().zip(rewards.terminal()).map(|(m, g)| m * g).sum::<f64>())
}

fn respond(problem: &ControlProblem<'_>, solver: SolverKind) -> Result<(OccupationMeasure, f64, RelaxedPolicy)> {
    let kernel = problem.kernel();
    match solver {
        SolverKind::Dp => {
            let dp = solve_dp(problem)?;
            let policy = dp.policy.to_relaxed(kernel.atoms());
            let occ = occupation_from_policy(kernel, &policy, problem.initial())?;
            Ok((occ, dp.value, policy))
        }
        SolverKind::Lp => {
            let lp = solve_lp(problem)?;
            let policy = admissible_projection(&lp.occupation, kernel)?;
            Ok((lp.occupation, lp.value, policy))
        }
    }
}

/// `Φ(μ)`: the optimally controlled flow against `flow`, using `kernel`
/// (which must have been built against `flow`).
pub fn best_response(
    model: &MfgModel,
    flow: &MeasureFlow,
    lattice: &StateLattice,
    grid: &TimeGrid,
    kernel: &TransitionKernel,
    solver: SolverKind,
) -> Result<BestResponse> {
    let problem = ControlProblem::from_model(model, flow, lattice, grid, kernel)?;
    let (occupation, value, policy) = respond(&problem, solver)?;
    Ok(BestResponse {
        flow: flow_from_occupation(lattice, flow.times(), &occupation)?,
        occupation,
        value,
        policy,
    })
}

/// Stagnation test on a residual history: with at least 40 entries, true when
/// the best of the last 20 exceeds `0.9 ×` the best of the 20 before them and
/// is still above `tol`.
pub fn detect_oscillation(history: &[f64], tol: f64) -> bool {
    const WINDOW: usize = 20;
    if history.len() < 2 * WINDOW {
        return false;
    }
    let n = history.len();
    let best = |s: &[f64]| s.iter().copied().fold(f64::INFINITY, f64::min);
    let recent = best(&history[n - WINDOW..]);
    let before = best(&history[n - 2 * WINDOW..n - WINDOW]);
    recent > tol && recent > 0.9 * before
}

/// Policy playing the first admissible atom at every `(t, x)`.
fn first_atom_policy(kernel: &TransitionKernel) -> Result<RelaxedPolicy> {
    let (steps, nodes, atoms) = (kernel.steps(), kernel.nodes(), kernel.atoms());
    let mut actions = Vec::with_capacity(steps * nodes);
    for k in 0..steps {
        for i in 0..nodes {
            actions.push(kernel.first_admissible(k, i).ok_or_else(|| {
                MfgError::KernelCorrupted(format!("no admissible control at step {k}, node {i}"))
            })?);
        }
    }
    Ok(StrictPolicy::new(steps, nodes, actions)?.to_relaxed(atoms))
}

fn convexity_probe(model: &MfgModel, disc: &Discretization, seed: u64) -> ConvexityReport {
    let lambda = model.initial_law();
    let mean = lambda.mean();
    let lattice = &disc.lattice;
    let probes = [lattice.node(lattice.nearest(&mean)).to_vec(), lattice.node(lattice.len() / 2).to_vec()];
    let options = ConvexityOptions {
        draws: 50,
        seed,
        tolerance: ConvexityTolerance::GridResolution,
    };
    let mut merged: Option<ConvexityReport> = None;
    for x in &probes {
        let r = check_convexity(model, 0.0, x, lambda, &options);
        merged = Some(match merged {
            None => r,
            Some(prev) => {
                let rank = |v: ConvexityVerdict| match v {
                    ConvexityVerdict::Pass => 0,
                    ConvexityVerdict::Inconclusive => 1,
                    ConvexityVerdict::Fail => 2,
                };
                if rank(r.verdict) > rank(prev.verdict) {
                    r
                } else {
                    prev
                }
            }
        });
    }
    merged.expect("at least one probe")
}

/// Markovian projection whose rows at massless nodes play the first
/// admissible atom, so the policy can be rolled out under `kernel` even where
/// the projection's default atom is cut by the step-size restriction.
fn admissible_projection(occ: &OccupationMeasure, kernel: &TransitionKernel) -> Result<RelaxedPolicy> {
    let mut policy = markov_project(occ);
    for k in 0..kernel.steps() {
        for i in 0..kernel.nodes() {
            let row = policy.distribution_mut(k, i);
            if row.iter().enumerate().any(|(j, &q)| q > 0.0 && !kernel.is_admissible(k, i, j)) {
                let j = kernel.first_admissible(k, i).ok_or_else(|| {
                    MfgError::KernelCorrupted(format!("no admissible control at step {k}, node {i}"))
                })?;
                row.fill(0.0);
                row[j] = 1.0;
            }
        }
    }
    Ok(policy)
}

/// Runs the damped best-response iteration from the flow of the
/// first-admissible-atom policy against the constant-`λ` flow.
pub fn iterate(model: &MfgModel, disc: &Discretization, config: &SolveConfig) -> Result<SolveReport> {
    config.validate()?;
    let Discretization { lattice, grid, cfl } = disc;
    if (model.horizon() - grid.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
        return Err(MfgError::TimeGridMismatch(format!(
            "model horizon {} but grid horizon {}",
            model.horizon(),
            grid.horizon()
        )));
    }
    let times = grid.times();
    let initial_flow = MeasureFlow::constant(times.clone(), model.initial_law())?;
    let initial = lattice.dense_from_measure(model.initial_law())?;
    let mut kernel = build_kernel(model, &initial_flow, lattice, grid, *cfl)?;
    let rebuild = model.coefficients().dynamics_depend_on_population();
    let reuse_running = !model.coefficients().running_reward_depends_on_population();
    let mut cached_rewards: Option<RewardTable> = None;
    let mut average = occupation_from_policy(&kernel, &first_atom_policy(&kernel)?, &initial)?;
    let mut flow = flow_from_occupation(lattice, &times, &average)?;

    let convexity = model
        .controls()
        .convex_hint()
        .then(|| convexity_probe(model, disc, config.seed));

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut residuals = Vec::new();
    let mut status = SolveStatus::BudgetExhausted;
    for iter in 0..config.max_iter {
        if rebuild && iter > 0 {
            kernel = build_kernel(model, &flow, lattice, grid, *cfl)?;
        }
        let rewards = match cached_rewards.take() {
            Some(mut rewards) if reuse_running => {
                rewards.refresh_terminal(model, &flow, lattice)?;
                rewards
            }
            _ => RewardTable::build(model, &flow, lattice, grid)?,
        };
        let problem = ControlProblem::new(&kernel, rewards, initial.clone())?;
        let (response, marginals, value) = match config.solver {
            SolverKind::Dp => {
                let dp = solve_dp(&problem)?;
                let marginals = strict_marginals(&kernel, &dp.policy, &initial);
                (Response::Strict(dp.policy), marginals, dp.value)
            }
            SolverKind::Lp => {
                let lp = solve_lp(&problem)?;
                let marginals = (0..=kernel.steps()).map(|k| lp.occupation.state_marginal(k)).collect();
                (Response::Occupation(lp.occupation), marginals, lp.value)
            }
        };
        let response_flow = flow_from_dense(lattice, &times, &marginals)?;
        let residual = flow_distance(&flow, &response_flow, config.p)?;
        if !residual.is_finite() {
            return Err(MfgError::NonFiniteResidual(iter));
        }
        let exploitability = value - projected_value(&average, &problem)?;
        cached_rewards = Some(problem.into_rewards());
        records.push(IterationRecord {
            iter,
            flow_residual: residual,
            exploitability,
            value,
            mean_terminal: flow.terminal().mean()[0],
        });
        residuals.push(residual);
        if residual <= config.tol && exploitability <= config.exploitability_tolerance(value) {
            status = SolveStatus::Converged;
            break;
        }
        if matches!(config.damping, Damping::Constant(_)) && detect_oscillation(&residuals, config.tol) {
            status = SolveStatus::Oscillating;
            break;
        }
        if iter + 1 == config.max_iter {
            break;
        }
        let omega = config.damping.weight(iter);
        match &response {
            Response::Strict(policy) => average.mix_strict_in_place(policy, &marginals, omega),
            Response::Occupation(occ) => average.mix_in_place(occ, omega)?,
        }
        flow = flow_from_occupation(lattice, &times, &average)?;
    }
    let final_policy = admissible_projection(&average, &kernel)?;
    let value = records.last().expect("at least one iteration").value;

    let strict = if status == SolveStatus::Converged
        && config.strictify
        && convexity.as_ref().is_some_and(|c| c.verdict != ConvexityVerdict::Fail)
    {
        Some(certify_strict(model, disc, &flow, &kernel, &initial, &final_policy, config)?)
    } else {
        None
    };

    Ok(SolveReport {
        status,
        iterations: records,
        final_flow: flow,
        final_policy,
        value,
        strict,
        convexity,
    })
}

fn certify_strict(
    model: &MfgModel,
    disc: &Discretization,
    flow: &MeasureFlow,
    kernel: &TransitionKernel,
    initial: &[f64],
    qhat: &RelaxedPolicy,
    config: &SolveConfig,
) -> Result<StrictCertificate> {
    let problem = ControlProblem::from_model(model, flow, &disc.lattice, &disc.grid, kernel)?;
    let (policy, gaps) = strictify(
        model,
        flow,
        &disc.lattice,
        &disc.grid,
        &problem,
        qhat,
        &StrictifyOptions::default(),
    )?;
    let occ = occupation_from_policy(kernel, &policy.to_relaxed(kernel.atoms()), initial)?;
    let strict_flow = flow_from_occupation(&disc.lattice, flow.times(), &occ)?;
    let distance = flow_distance(flow, &strict_flow, config.p)?;
    let horizon = disc.grid.horizon();
    let bound = config.tol + horizon * gaps.max_drift_mismatch + (horizon * gaps.max_diffusion_mismatch).sqrt();
    Ok(StrictCertificate {
        policy,
        certified: distance <= bound,
        flow_distance: distance,
        bound,
        gaps,
    })
}

/// One rung of the truncation ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderEntry {
    pub n: u32,
    pub radius: f64,
    /// `max_t ∫|x|^{p′} dμ_t` of the final flow, when the level solved.
    pub moment: Option<f64>,
    pub outcome: std::result::Result<SolveReport, MfgError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderReport {
    pub entries: Vec<LadderEntry>,
    /// Every solved level's moment lies within a factor 1.5 of the first solved level's.
    pub moment_bound_ok: bool,
}

/// Solves with the control set truncated to `|a| ≤ r_n` for each level `n`.
/// Per-level failures are recorded and the ladder continues.
pub fn truncation_ladder(
    model: &MfgModel,
    disc: &Discretization,
    config: &SolveConfig,
    levels: &[u32],
) -> Result<LadderReport> {
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MfgError::InvalidArgument("ladder levels must be increasing".into()));
    }
    let c1 = model.constants().c1;
    let p_prime = model.constants().p_prime;
    let entries: Vec<LadderEntry> = levels
        .iter()
        .map(|&n| {
            let outcome = truncate_controls(model.controls(), n, c1)
                .and_then(|controls| iterate(&model.with_controls(controls), disc, config));
            let moment = outcome.as_ref().ok().map(|r| {
                r.final_flow
                    .marginals()
                    .iter()
                    .map(|mu| moment(mu, p_prime))
                    .fold(0.0, f64::max)
            });
            LadderEntry {
                n,
                radius: truncation_radius(n, c1),
                moment,
                outcome,
            }
        })
        .collect();
    let moments: Vec<f64> = entries.iter().filter_map(|e| e.moment).collect();
    let moment_bound_ok = match moments.first() {
        None => false,
        Some(&first) => moments.iter().all(|&m| m <= 1.5 * first && first <= 1.5 * m),
    };
    Ok(LadderReport { entries, moment_bound_ok })
}
