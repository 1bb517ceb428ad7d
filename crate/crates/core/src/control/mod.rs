//! Best response against a fixed population flow.
//!
//! A [`ControlProblem`] packages a transition kernel, per-step rewards and the
//! initial node masses. Two solvers answer it: backward dynamic programming
//! ([`solve_dp`]) and a linear program over occupation measures
//! ([`solve_lp`]), which ranges over relaxed controls directly.

mod lp;
mod simplex;

pub use lp::{solve_lp, LpSolution};

use rayon::prelude::*;

use crate::error::{MfgError, Result};
use crate::kernel::{StateLattice, TimeGrid, TransitionKernel};
use crate::measures::MeasureFlow;
use crate::model::{ControlSpace, MfgModel, Population};

/// Tolerance on occupation-measure invariants.
pub const OCCUPATION_TOLERANCE: f64 = 1e-9;

/// `q(t, x)` as a probability vector over control atoms, for every step and node.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPolicy {
    steps: usize,
    nodes: usize,
    atoms: usize,
    probs: Vec<f64>,
}

impl RelaxedPolicy {
    pub fn new(steps: usize, nodes: usize, atoms: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != steps * nodes * atoms || atoms == 0 {
            return Err(MfgError::InvalidArgument(format!(
                "{} probabilities for {steps} steps × {nodes} nodes × {atoms} atoms",
                probs.len()
            )));
        }
        for (r, q) in probs.chunks(atoms).enumerate() {
            let total: f64 = q.iter().sum();
            if q.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(MfgError::InvalidArgument(format!(
                    "policy row {r} is not a probability vector"
                )));
            }
        }
        Ok(Self {
            steps,
            nodes,
            atoms,
            probs,
        })
    }

    pub fn uniform(steps: usize, nodes: usize, atoms: usize) -> Self {
        Self {
            steps,
            nodes,
            atoms,
            probs: vec![1.0 / atoms as f64; steps * nodes * atoms],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn distribution(&self, k: usize, i: usize) -> &[f64] {
        let r = (k * self.nodes + i) * self.atoms;
        &self.probs[r..r + self.atoms]
    }

    pub(crate) fn distribution_mut(&mut self, k: usize, i: usize) -> &mut [f64] {
        let r = (k * self.nodes + i) * self.atoms;
        &mut self.probs[r..r + self.atoms]
    }

    /// `∫ a q(t, x)(da)`.
    pub fn barycenter(&self, k: usize, i: usize, controls: &ControlSpace) -> Vec<f64> {
        let mut out = vec![0.0; controls.dimension()];
        for (j, &q) in self.distribution(k, i).iter().enumerate() {
            for (o, a) in out.iter_mut().zip(controls.atom(j)) {
                *o += q * a;
            }
        }
        out
    }
}

/// One control atom per step and node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrictPolicy {
    steps: usize,
    nodes: usize,
    actions: Vec<usize>,
}

impl StrictPolicy {
    pub fn new(steps: usize, nodes: usize, actions: Vec<usize>) -> Result<Self> {
        if actions.len() != steps * nodes {
            return Err(MfgError::InvalidArgument(format!(
                "{} actions for {steps} steps × {nodes} nodes",
                actions.len()
            )));
        }
        Ok(Self {
            steps,
            nodes,
            actions,
        })
    }

    pub fn constant(steps: usize, nodes: usize, atom: usize) -> Self {
        Self {
            steps,
            nodes,
            actions: vec![atom; steps * nodes],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn action(&self, k: usize, i: usize) -> usize {
        self.actions[k * self.nodes + i]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn to_relaxed(&self, atoms: usize) -> RelaxedPolicy {
        let mut probs = vec![0.0; self.actions.len() * atoms];
        for (r, &j) in self.actions.iter().enumerate() {
            probs[r * atoms + j] = 1.0;
        }
        RelaxedPolicy {
            steps: self.steps,
            nodes: self.nodes,
            atoms,
            probs,
        }
    }
}

/// Weights `m_t(x, a)` for `t < N` and the terminal state marginal `ρ_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationMeasure {
    steps: usize,
    nodes: usize,
    atoms: usize,
    weights: Vec<f64>,
    terminal: Vec<f64>,
}

impl OccupationMeasure {
    /// Assembles an occupation measure; invariants are checked by [`validate`](Self::validate).
    pub fn new(
        steps: usize,
        nodes: usize,
        atoms: usize,
        weights: Vec<f64>,
        terminal: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != steps * nodes * atoms || terminal.len() != nodes {
            return Err(MfgError::InvalidArgument(
                "occupation arrays do not match the grid".into(),
            ));
        }
        Ok(Self {
            steps,
            nodes,
            atoms,
            weights,
            terminal,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    /// `m_k(·, ·)` laid out node-major.
    pub fn weights(&self, k: usize) -> &[f64] {
        let w = self.nodes * self.atoms;
        &self.weights[k * w..(k + 1) * w]
    }

    pub fn weight(&self, k: usize, i: usize, j: usize) -> f64 {
        self.weights[(k * self.nodes + i) * self.atoms + j]
    }

    pub fn terminal(&self) -> &[f64] {
        &self.terminal
    }

    /// State marginal at step `k ≤ N`.
    pub fn state_marginal(&self, k: usize) -> Vec<f64> {
        if k == self.steps {
            return self.terminal.clone();
        }
        self.weights(k)
            .chunks(self.atoms)
            .map(|row| row.iter().sum())
            .collect()
    }

    /// `(1 − ω)·self + ω·other`.
    pub fn mix(&self, other: &Self, omega: f64) -> Result<Self> {
        if (self.steps, self.nodes, self.atoms) != (other.steps, other.nodes, other.atoms) {
            return Err(MfgError::InvalidArgument(
                "occupation measures live on different grids".into(),
            ));
        }
        let blend = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter()
                .zip(b)
                .map(|(x, y)| (1.0 - omega) * x + omega * y)
                .collect()
        };
        Ok(Self {
            weights: blend(&self.weights, &other.weights),
            terminal: blend(&self.terminal, &other.terminal),
            ..*self
        })
    }

    /// In-place `self ← (1 − ω)·self + ω·other`.
    pub(crate) fn mix_in_place(&mut self, other: &Self, omega: f64) -> Result<()> {
        if (self.steps, self.nodes, self.atoms) != (other.steps, other.nodes, other.atoms) {
            return Err(MfgError::InvalidArgument(
                "occupation measures live on different grids".into(),
            ));
        }
        for (x, y) in self.weights.iter_mut().zip(&other.weights) {
            *x = (1.0 - omega) * *x + omega * y;
        }
        for (x, y) in self.terminal.iter_mut().zip(&other.terminal) {
            *x = (1.0 - omega) * *x + omega * y;
        }
        Ok(())
    }

    /// In-place mix with the occupation of a strict policy whose state
    /// marginals are `marginals[0..=N]`, without materializing it.
    pub(crate) fn mix_strict_in_place(&mut self, policy: &StrictPolicy, marginals: &[Vec<f64>], omega: f64) {
        let keep = 1.0 - omega;
        self.weights.iter_mut().for_each(|x| *x *= keep);
        for k in 0..self.steps {
            for (i, &m) in marginals[k].iter().enumerate() {
                if m != 0.0 {
                    self.weights[(k * self.nodes + i) * self.atoms + policy.action(k, i)] += omega * m;
                }
            }
        }
        for (x, y) in self.terminal.iter_mut().zip(&marginals[self.steps]) {
            *x = keep * *x + omega * y;
        }
    }

    /// Checks nonnegativity, mass one, the initial law, the flow constraints
    /// under `kernel`, and that inadmissible controls carry no weight.
    pub fn validate(&self, kernel: &TransitionKernel, initial: &[f64], tol: f64) -> Result<()> {
        let bad = |what: String| Err(MfgError::InvalidArgument(format!("occupation measure: {what}")));
        if (self.steps, self.nodes, self.atoms) != (kernel.steps(), kernel.nodes(), kernel.atoms()) {
            return Err(MfgError::TimeGridMismatch(
                "occupation measure and kernel use different grids".into(),
            ));
        }
        if initial.len() != self.nodes {
            return bad("initial law has the wrong length".into());
        }
        if let Some(w) = self
            .weights
            .iter()
            .chain(&self.terminal)
            .find(|&&w| !(w >= -tol))
        {
            return bad(format!("negative weight {w}"));
        }
        let mut expected = initial.to_vec();
        for k in 0..=self.steps {
            let marginal = self.state_marginal(k);
            let total: f64 = marginal.iter().sum();
            if (total - 1.0).abs() > tol {
                return bad(format!("step {k} carries mass {total}"));
            }
            if let Some(i) = (0..self.nodes).find(|&i| (marginal[i] - expected[i]).abs() > tol) {
                return bad(format!(
                    "flow constraint fails at step {k}, node {i}: {} vs {}",
                    marginal[i], expected[i]
                ));
            }
            if k == self.steps {
                break;
            }
            let mut next = vec![0.0; self.nodes];
            for i in 0..self.nodes {
                for j in 0..self.atoms {
                    let w = self.weight(k, i, j);
                    if w == 0.0 {
                        continue;
                    }
                    if !kernel.is_admissible(k, i, j) {
                        if w.abs() > tol {
                            return bad(format!("weight on inadmissible atom {j} at step {k}, node {i}"));
                        }
                        continue;
                    }
                    kernel.scatter(k, i, j, w, &mut next);
                }
            }
            expected = next;
        }
        Ok(())
    }
}

/// `V(t, x)` for `t = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    steps: usize,
    nodes: usize,
    values: Vec<f64>,
}

impl ValueField {
    pub fn value(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.nodes + i]
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.values[k * self.nodes..(k + 1) * self.nodes]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Running rewards already weighted by `Δt`, and terminal rewards on nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    steps: usize,
    nodes: usize,
    atoms: usize,
    running: Vec<f64>,
    terminal: Vec<f64>,
}

impl RewardTable {
    pub fn new(
        steps: usize,
        nodes: usize,
        atoms: usize,
        running: Vec<f64>,
        terminal: Vec<f64>,
    ) -> Result<Self> {
        if running.len() != steps * nodes * atoms || terminal.len() != nodes {
            return Err(MfgError::InvalidArgument("reward arrays do not match the grid".into()));
        }
        if running.iter().chain(&terminal).any(|v| !v.is_finite()) {
            return Err(MfgError::InvalidArgument("non-finite reward".into()));
        }
        Ok(Self {
            steps,
            nodes,
            atoms,
            running,
            terminal,
        })
    }

    /// `f(t_k, x_i, μ_k, a_j)·Δt` and `g(x_i, μ_N)` for a model against `flow`.
    pub fn build(
        model: &MfgModel,
        flow: &MeasureFlow,
        lattice: &StateLattice,
        grid: &TimeGrid,
    ) -> Result<Self> {
        if !grid.matches(flow.times()) {
            return Err(MfgError::TimeGridMismatch(
                "flow times do not match the time grid".into(),
            ));
        }
        let (n, m, dt) = (lattice.len(), model.controls().len(), grid.dt());
        let coeffs = model.coefficients();
        let slices: Vec<Result<Vec<f64>>> = (0..grid.steps())
            .into_par_iter()
            .map(|k| {
                let t = grid.time(k);
                let pop = Population::new(flow.marginal(k));
                let mut out = Vec::with_capacity(n * m);
                for i in 0..n {
                    let x = lattice.node(i);
                    for a in model.controls().atoms() {
                        let f = coeffs.running_reward(t, x, &pop, a);
                        if !f.is_finite() {
                            return Err(MfgError::NonFinite {
                                t,
                                x: x.to_vec(),
                                a: a.to_vec(),
                            });
                        }
                        out.push(f * dt);
                    }
                }
                Ok(out)
            })
            .collect();
        let mut running = Vec::with_capacity(grid.steps() * n * m);
        for s in slices {
            running.extend(s?);
        }
        let terminal = terminal_rewards(model, flow, lattice)?;
        Ok(Self {
            steps: grid.steps(),
            nodes: n,
            atoms: m,
            running,
            terminal,
        })
    }

    /// Re-evaluates only `g` against the terminal marginal of `flow`.
    pub(crate) fn refresh_terminal(&mut self, model: &MfgModel, flow: &MeasureFlow, lattice: &StateLattice) -> Result<()> {
        self.terminal = terminal_rewards(model, flow, lattice)?;
        Ok(())
    }

    pub(crate) fn running_row(&self, k: usize, i: usize) -> &[f64] {
        let at = (k * self.nodes + i) * self.atoms;
        &self.running[at..at + self.atoms]
    }

    pub fn running(&self, k: usize, i: usize, j: usize) -> f64 {
        self.running[(k * self.nodes + i) * self.atoms + j]
    }

    pub fn terminal(&self) -> &[f64] {
        &self.terminal
    }
}

/// `g(x_i, μ_N)` at every node.
fn terminal_rewards(model: &MfgModel, flow: &MeasureFlow, lattice: &StateLattice) -> Result<Vec<f64>> {
    let coeffs = model.coefficients();
    let n = lattice.len();
        let pop = Population::new(flow.terminal());
        let mut terminal = Vec::with_capacity(n);
        for i in 0..n {
            let g = coeffs.terminal_reward(lattice.node(i), &pop);
            if !g.is_finite() {
                return Err(MfgError::NonFinite {
                    t: flow.horizon(),
                    x: lattice.node(i).to_vec(),
                    a: Vec::new(),
                });
            }
            terminal.push(g);
        }
    Ok(terminal)
}


/// A finite-horizon control problem on a lattice against a frozen population flow.
#[derive(Debug, Clone)]
pub struct ControlProblem<'k> {
    kernel: &'k TransitionKernel,
    rewards: RewardTable,
    initial: Vec<f64>,
}

impl<'k> ControlProblem<'k> {
    pub fn new(kernel: &'k TransitionKernel, rewards: RewardTable, initial: Vec<f64>) -> Result<Self> {
        if (rewards.steps, rewards.nodes, rewards.atoms) != (kernel.steps(), kernel.nodes(), kernel.atoms()) {
            return Err(MfgError::TimeGridMismatch(
                "rewards and kernel use different grids".into(),
            ));
        }
        let total: f64 = initial.iter().sum();
        if initial.len() != kernel.nodes() || initial.iter().any(|&m| !(m >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(MfgError::InvalidMeasure(
                "initial node masses must be a probability vector on the lattice".into(),
            ));
        }
        Ok(Self {
            kernel,
            rewards,
            initial,
        })
    }

    /// The model's best-response problem against `flow`, with `λ` placed on the lattice.
    pub fn from_model(
        model: &MfgModel,
        flow: &MeasureFlow,
        lattice: &StateLattice,
        grid: &TimeGrid,
        kernel: &'k TransitionKernel,
    ) -> Result<Self> {
        let rewards = RewardTable::build(model, flow, lattice, grid)?;
        let initial = lattice.dense_from_measure(model.initial_law())?;
        Self::new(kernel, rewards, initial)
    }

    pub fn kernel(&self) -> &'k TransitionKernel {
        self.kernel
    }

    pub fn rewards(&self) -> &RewardTable {
        &self.rewards
    }

    pub(crate) fn into_rewards(self) -> RewardTable {
        self.rewards
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    fn steps(&self) -> usize {
        self.kernel.steps()
    }

    fn nodes(&self) -> usize {
        self.kernel.nodes()
    }

    fn atoms(&self) -> usize {
        self.kernel.atoms()
    }

    /// `r(k, i, j) + Σ K(x′|i, j) V_{k+1}(x′)`.
    pub fn q_value(&self, k: usize, i: usize, j: usize, next: &[f64]) -> f64 {
        self.rewards.running(k, i, j) + self.kernel.expectation(k, i, j, next)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpSolution {
    pub values: ValueField,
    pub policy: StrictPolicy,
    pub value: f64,
}

/// Backward induction; ties go to the smallest atom index.
pub fn solve_dp(problem: &ControlProblem<'_>) -> Result<DpSolution> {
    let (steps, nodes) = (problem.steps(), problem.nodes());
    let mut values = vec![0.0; (steps + 1) * nodes];
    values[steps * nodes..].copy_from_slice(problem.rewards.terminal());
    let mut actions = vec![0usize; steps * nodes];
    for k in (0..steps).rev() {
        let (head, tail) = values.split_at_mut((k + 1) * nodes);
        let next = &tail[..nodes];
        let current = &mut head[k * nodes..];
        current
            .par_iter_mut()
            .zip(actions[k * nodes..(k + 1) * nodes].par_iter_mut())
            .enumerate()
            .try_for_each(|(i, (v, act))| {
                let running = problem.rewards.running_row(k, i);
                let mut best: Option<(usize, f64)> = None;
                problem.kernel.for_each_expectation(k, i, next, |j, ev| {
                    let q = running[j] + ev;
                    if best.is_none_or(|(_, b)| q > b) {
                        best = Some((j, q));
                    }
                });
                let (j, q) = best.ok_or_else(|| {
                    MfgError::KernelCorrupted(format!("no admissible control at step {k}, node {i}"))
                })?;
                *v = q;
                *act = j;
                Ok::<(), MfgError>(())
            })?;
    }
    let value = problem
        .initial
        .iter()
        .zip(&values[..nodes])
        .map(|(m, v)| m * v)
        .sum();
    Ok(DpSolution {
        values: ValueField {
            steps,
            nodes,
            values,
        },
        policy: StrictPolicy::new(steps, nodes, actions)?,
        value,
    })
}

/// Value field of a fixed relaxed policy.
pub fn evaluate_policy(problem: &ControlProblem<'_>, policy: &RelaxedPolicy) -> Result<ValueField> {
    let (steps, nodes, atoms) = (problem.steps(), problem.nodes(), problem.atoms());
    if (policy.steps, policy.nodes, policy.atoms) != (steps, nodes, atoms) {
        return Err(MfgError::TimeGridMismatch(
            "policy and problem use different grids".into(),
        ));
    }
    let mut values = vec![0.0; (steps + 1) * nodes];
    values[steps * nodes..].copy_from_slice(problem.rewards.terminal());
    for k in (0..steps).rev() {
        let (head, tail) = values.split_at_mut((k + 1) * nodes);
        let next = &tail[..nodes];
        for (i, v) in head[k * nodes..].iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &q) in policy.distribution(k, i).iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                if !problem.kernel.is_admissible(k, i, j) {
                    return Err(MfgError::InvalidArgument(format!(
                        "policy uses inadmissible atom {j} at step {k}, node {i}"
                    )));
                }
                acc += q * problem.q_value(k, i, j, next);
            }
            *v = acc;
        }
    }
    Ok(ValueField {
        steps,
        nodes,
        values,
    })
}

/// `Σ_t Σ_{x,a} m_t(x,a)·f·Δt + Σ_x ρ_N(x) g(x)`, after checking the invariants.
pub fn objective_eval(problem: &ControlProblem<'_>, occ: &OccupationMeasure) -> Result<f64> {
    occ.validate(problem.kernel, &problem.initial, OCCUPATION_TOLERANCE)?;
    Ok(objective_unchecked(problem, occ))
}

pub(crate) fn objective_unchecked(problem: &ControlProblem<'_>, occ: &OccupationMeasure) -> f64 {
    let running: f64 = occ
        .weights
        .iter()
        .zip(&problem.rewards.running)
        .map(|(w, r)| w * r)
        .sum();
    let terminal: f64 = occ
        .terminal
        .iter()
        .zip(problem.rewards.terminal())
        .map(|(w, g)| w * g)
        .sum();
    running + terminal
}

/// Best achievable value minus the value of `occ`.
pub fn exploitability(problem: &ControlProblem<'_>, occ: &OccupationMeasure) -> Result<f64> {
    Ok(solve_dp(problem)?.value - objective_eval(problem, occ)?)
}

/// Forward rollout `m_t(x, a) = ρ_t(x) q_t(x)(a)` from node masses `initial`.
pub fn occupation_from_policy(
    kernel: &TransitionKernel,
    policy: &RelaxedPolicy,
    initial: &[f64],
) -> Result<OccupationMeasure> {
    if (policy.steps, policy.nodes, policy.atoms) != (kernel.steps(), kernel.nodes(), kernel.atoms()) {
        return Err(MfgError::TimeGridMismatch(
            "policy and kernel use different grids".into(),
        ));
    }
    if initial.len() != kernel.nodes() {
        return Err(MfgError::InvalidArgument(
            "initial masses do not match the lattice".into(),
        ));
    }
    let (steps, nodes, atoms) = (kernel.steps(), kernel.nodes(), kernel.atoms());
    let mut weights = Vec::with_capacity(steps * nodes * atoms);
    let mut rho = initial.to_vec();
    for k in 0..steps {
        for (i, &m) in rho.iter().enumerate() {
            weights.extend(policy.distribution(k, i).iter().map(|q| m * q));
        }
        rho = kernel.push_dense(k, &rho, policy)?;
    }
    OccupationMeasure::new(steps, nodes, atoms, weights, rho)
}
