//! From relaxed occupation measures to Markovian and strict controls, and
//! Monte Carlo simulation of the controlled diffusion.
//!
//! [`markov_project`] conditions the control on the current `(t, x)`; the
//! state marginals are unchanged ([`verify_mimicking`] checks this by exact
//! path enumeration). [`strictify`] then picks, node by node, one atom whose
//! drift and diffusion reproduce the relaxed barycenter without losing running
//! reward, and reports how far that selection is from exact.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::control::{
    evaluate_policy, occupation_from_policy, ControlProblem, OccupationMeasure, RelaxedPolicy,
    StrictPolicy,
};
use crate::error::{MfgError, Result};
use crate::kernel::{StateLattice, TimeGrid, TransitionKernel};
use crate::measures::{euclid, format_float, MeasureFlow};
use crate::model::{MfgModel, Population};

/// `q̂(t, x)(a) = m_t(x, a) / Σ_a′ m_t(x, a′)`; nodes without mass get atom 0.
pub fn markov_project(occ: &OccupationMeasure) -> RelaxedPolicy {
    let (steps, nodes, atoms) = (occ.steps(), occ.nodes(), occ.atoms());
    let mut probs = vec![0.0; steps * nodes * atoms];
    for k in 0..steps {
        for (i, row) in occ.weights(k).chunks(atoms).enumerate() {
            let out = &mut probs[(k * nodes + i) * atoms..(k * nodes + i + 1) * atoms];
            let total: f64 = row.iter().map(|w| w.max(0.0)).sum();
            if total > 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o = w.max(0.0) / total;
                }
            } else {
                out[0] = 1.0;
            }
        }
    }
    RelaxedPolicy::new(steps, nodes, atoms, probs).expect("projected rows are probability vectors")
}

/// A control that may depend on the whole visited state history `x_0..x_k`.
pub trait HistoryPolicy: Sync {
    /// Writes the action distribution at step `k` into `out`.
    fn distribution(&self, k: usize, history: &[usize], out: &mut [f64]);
}

impl HistoryPolicy for RelaxedPolicy {
    fn distribution(&self, k: usize, history: &[usize], out: &mut [f64]) {
        out.copy_from_slice(RelaxedPolicy::distribution(self, k, *history.last().expect("nonempty history")));
    }
}

/// A history-dependent policy backed by a closure.
pub struct FnHistoryPolicy<F>(pub F);

impl<F> HistoryPolicy for FnHistoryPolicy<F>
where
    F: Fn(usize, &[usize], &mut [f64]) + Sync,
{
    fn distribution(&self, k: usize, history: &[usize], out: &mut [f64]) {
        (self.0)(k, history, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MimickingOptions {
    /// Largest number of complete state paths to enumerate.
    pub budget: u64,
    /// Paths and seed for the Monte Carlo fallback; `None` turns it off.
    pub monte_carlo: Option<(u64, u64)>,
    /// Also compare full path laws (exact mode only).
    pub path_law: bool,
}

impl Default for MimickingOptions {
    fn default() -> Self {
        Self {
            budget: 1_000_000,
            monte_carlo: None,
            path_law: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MimickingReport {
    /// `max_t TV(ρ_t, ρ̂_t)` between the original and projected state marginals.
    pub marginal_distance: f64,
    /// TV between the laws of whole state paths, when requested.
    pub path_law_distance: Option<f64>,
    pub projected: RelaxedPolicy,
    pub exact: bool,
    pub paths: u64,
}

struct Enumeration<'a, P: HistoryPolicy + ?Sized> {
    kernel: &'a TransitionKernel,
    policy: &'a P,
    budget: u64,
    paths: u64,
    weights: Vec<f64>,
    terminal: Vec<f64>,
    law: Option<HashMap<Vec<usize>, f64>>,
}

impl<P: HistoryPolicy + ?Sized> Enumeration<'_, P> {
    fn visit(&mut self, history: &mut Vec<usize>, prob: f64) -> Result<()> {
        let (nodes, atoms, steps) = (self.kernel.nodes(), self.kernel.atoms(), self.kernel.steps());
        let k = history.len() - 1;
        let x = history[k];
        let mut q = vec![0.0; atoms];
        self.policy.distribution(k, history, &mut q);
        let mut next = vec![0.0; nodes];
        for (j, &qj) in q.iter().enumerate() {
            if qj == 0.0 {
                continue;
            }
            if !self.kernel.is_admissible(k, x, j) {
                return Err(MfgError::InvalidArgument(format!(
                    "policy uses inadmissible atom {j} at step {k}, node {x}"
                )));
            }
            self.weights[(k * nodes + x) * atoms + j] += prob * qj;
            self.kernel.scatter(k, x, j, qj, &mut next);
        }
        for (y, &p) in next.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            if k + 1 == steps {
                self.paths += 1;
                if self.paths > self.budget {
                    return Err(MfgError::EnumerationBudget {
                        needed: self.paths,
                        budget: self.budget,
                    });
                }
                self.terminal[y] += prob * p;
                if let Some(law) = self.law.as_mut() {
                    let mut path = history.clone();
                    path.push(y);
                    *law.entry(path).or_insert(0.0) += prob * p;
                }
            } else {
                history.push(y);
                self.visit(history, prob * p)?;
                history.pop();
            }
        }
        Ok(())
    }
}

fn enumerate<P: HistoryPolicy + ?Sized>(
    kernel: &TransitionKernel,
    policy: &P,
    initial: &[f64],
    budget: u64,
    path_law: bool,
) -> Result<(OccupationMeasure, Option<HashMap<Vec<usize>, f64>>, u64)> {
    let (steps, nodes, atoms) = (kernel.steps(), kernel.nodes(), kernel.atoms());
    let mut walk = Enumeration {
        kernel,
        policy,
        budget,
        paths: 0,
        weights: vec![0.0; steps * nodes * atoms],
        terminal: vec![0.0; nodes],
        law: path_law.then(HashMap::new),
    };
    for (i, &m) in initial.iter().enumerate() {
        if m > 0.0 {
            walk.visit(&mut vec![i], m)?;
        }
    }
    let occ = OccupationMeasure::new(steps, nodes, atoms, walk.weights, walk.terminal)?;
    Ok((occ, walk.law, walk.paths))
}

fn marginal_tv(a: &OccupationMeasure, b: &OccupationMeasure) -> f64 {
    (0..=a.steps())
        .map(|k| {
            let (x, y) = (a.state_marginal(k), b.state_marginal(k));
            0.5 * x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Compares the state marginals of `policy` with those of its Markovian projection.
pub fn verify_mimicking<P: HistoryPolicy + ?Sized>(
    kernel: &TransitionKernel,
    policy: &P,
    initial: &[f64],
    options: &MimickingOptions,
) -> Result<MimickingReport> {
    if initial.len() != kernel.nodes() {
        return Err(MfgError::InvalidArgument(
            "initial masses do not match the kernel".into(),
        ));
    }
    match enumerate(kernel, policy, initial, options.budget, options.path_law) {
        Ok((original, law, paths)) => {
            let projected = markov_project(&original);
            let rolled = occupation_from_policy(kernel, &projected, initial)?;
            let path_law_distance = match law {
                Some(law) => {
                    let (_, markov_law, _) = enumerate(kernel, &projected, initial, u64::MAX, true)?;
                    let markov_law = markov_law.expect("requested");
                    let mut tv = 0.0;
                    for (path, p) in &law {
                        tv += (p - markov_law.get(path).copied().unwrap_or(0.0)).abs();
                    }
                    for (path, p) in &markov_law {
                        if !law.contains_key(path) {
                            tv += p;
                        }
                    }
                    Some(0.5 * tv)
                }
                None => None,
            };
            Ok(MimickingReport {
                marginal_distance: marginal_tv(&original, &rolled),
                path_law_distance,
                projected,
                exact: true,
                paths,
            })
        }
        Err(MfgError::EnumerationBudget { needed, budget }) => match options.monte_carlo {
            None => Err(MfgError::EnumerationBudget { needed, budget }),
            Some((n_paths, seed)) => monte_carlo_mimicking(kernel, policy, initial, n_paths, seed),
        },
        Err(e) => Err(e),
    }
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

fn monte_carlo_mimicking<P: HistoryPolicy + ?Sized>(
    kernel: &TransitionKernel,
    policy: &P,
    initial: &[f64],
    n_paths: u64,
    seed: u64,
) -> Result<MimickingReport> {
    let (steps, nodes, atoms) = (kernel.steps(), kernel.nodes(), kernel.atoms());
    let samples: Vec<(Vec<usize>, Vec<usize>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p);
            let mut history = vec![sample_index(&mut rng, initial)];
            let mut actions = Vec::with_capacity(steps);
            let mut q = vec![0.0; atoms];
            for k in 0..steps {
                policy.distribution(k, &history, &mut q);
                let j = sample_index(&mut rng, &q);
                let (targets, probs) = kernel.row(k, history[k], j);
                let y = targets[sample_index(&mut rng, probs)] as usize;
                actions.push(j);
                history.push(y);
            }
            (history, actions)
        })
        .collect();
    let w = 1.0 / n_paths as f64;
    let mut weights = vec![0.0; steps * nodes * atoms];
    let mut terminal = vec![0.0; nodes];
    for (history, actions) in &samples {
        for k in 0..steps {
            weights[(k * nodes + history[k]) * atoms + actions[k]] += w;
        }
        terminal[history[steps]] += w;
    }
    let empirical = OccupationMeasure::new(steps, nodes, atoms, weights, terminal)?;
    let projected = markov_project(&empirical);
    let rolled = occupation_from_policy(kernel, &projected, initial)?;
    Ok(MimickingReport {
        marginal_distance: marginal_tv(&empirical, &rolled),
        path_law_distance: None,
        projected,
        exact: false,
        paths: n_paths,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StrictifyOptions {
    /// Reward tolerance where the barycenter is not an atom image; defaults to
    /// the local reward variation between neighbouring atoms.
    pub tol_f: Option<f64>,
}

/// How far a strict selection is from reproducing the relaxed control.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub max_drift_mismatch: f64,
    pub max_diffusion_mismatch: f64,
    /// `min f(a*) − ∫ f dq̂` over all `(t, x)`.
    pub min_f_surplus: f64,
    /// Number of `(t, x)` where no atom met the reward constraint.
    pub failed_nodes: usize,
    pub failed: bool,
    /// Upper bound on `J(relaxed) − J(strict)`: the sum over steps of the
    /// worst one-step disadvantage of `a*` under the relaxed value function.
    pub value_loss_bound: f64,
    pub relaxed_value: f64,
    pub strict_value: f64,
}

/// Selects one atom per `(t, x)` matching the drift/diffusion barycenter of
/// `qhat` subject to `f(a*) ≥ ∫ f dq̂ − tol_f`.
pub fn strictify(
    model: &MfgModel,
    flow: &MeasureFlow,
    lattice: &StateLattice,
    grid: &TimeGrid,
    problem: &ControlProblem<'_>,
    qhat: &RelaxedPolicy,
    options: &StrictifyOptions,
) -> Result<(StrictPolicy, GapReport)> {
    let kernel = problem.kernel();
    let (steps, nodes, atoms) = (kernel.steps(), kernel.nodes(), kernel.atoms());
    if (qhat.steps(), qhat.nodes(), qhat.atoms()) != (steps, nodes, atoms) {
        return Err(MfgError::TimeGridMismatch(
            "relaxed policy and kernel use different grids".into(),
        ));
    }
    if !grid.matches(flow.times()) || grid.steps() != steps || lattice.len() != nodes {
        return Err(MfgError::TimeGridMismatch(
            "flow, grid and kernel disagree".into(),
        ));
    }
    let d = model.dimension();
    let controls = model.controls();
    let neighbour: Vec<Option<usize>> = (0..atoms)
        .map(|j| {
            (0..atoms)
                .filter(|&k| k != j)
                .min_by(|&a, &b| {
                    euclid(controls.atom(j), controls.atom(a))
                        .total_cmp(&euclid(controls.atom(j), controls.atom(b)))
                })
        })
        .collect();
    let relaxed_values = evaluate_policy(problem, qhat)?;

    struct NodeChoice {
        atom: usize,
        drift_gap: f64,
        diffusion_gap: f64,
        surplus: f64,
        failed: bool,
    }
    let coeffs = model.coefficients();
    let slices: Vec<Vec<NodeChoice>> = (0..steps)
        .into_par_iter()
        .map(|k| {
            let t = grid.time(k);
            let pop = Population::new(flow.marginal(k));
            let mut b = vec![0.0; atoms * d];
            let mut s = vec![0.0; atoms * d * d];
            let mut f = vec![0.0; atoms];
            (0..nodes)
                .map(|i| {
                    let x = lattice.node(i);
                    for j in 0..atoms {
                        let a = controls.atom(j);
                        coeffs.drift(t, x, &pop, a, &mut b[j * d..(j + 1) * d]);
                        coeffs.diffusion(t, x, &pop, a, &mut s[j * d * d..(j + 1) * d * d]);
                        f[j] = coeffs.running_reward(t, x, &pop, a);
                    }
                    let q = qhat.distribution(k, i);
                    let mut bb = vec![0.0; d];
                    let mut ss = vec![0.0; d * d];
                    let mut ff = 0.0;
                    for j in 0..atoms {
                        if q[j] == 0.0 {
                            continue;
                        }
                        for (o, v) in bb.iter_mut().zip(&b[j * d..(j + 1) * d]) {
                            *o += q[j] * v;
                        }
                        for (o, v) in ss.iter_mut().zip(&s[j * d * d..(j + 1) * d * d]) {
                            *o += q[j] * v;
                        }
                        ff += q[j] * f[j];
                    }
                    let gaps = |j: usize| {
                        (
                            euclid(&b[j * d..(j + 1) * d], &bb),
                            euclid(&s[j * d * d..(j + 1) * d * d], &ss),
                        )
                    };
                    let admissible: Vec<usize> =
                        (0..atoms).filter(|&j| kernel.is_admissible(k, i, j)).collect();
                    let representable = admissible.iter().any(|&j| {
                        let (g1, g2) = gaps(j);
                        g1 + g2 <= 1e-9
                    });
                    let tol_f = if representable {
                        1e-9
                    } else {
                        options.tol_f.unwrap_or_else(|| {
                            (0..atoms)
                                .filter_map(|j| neighbour[j].map(|n| (f[j] - f[n]).abs()))
                                .fold(0.0, f64::max)
                        })
                    };
                    let better = |j: usize, cur: Option<usize>| -> bool {
                        let Some(c) = cur else { return true };
                        let (a1, a2) = gaps(j);
                        let (c1, c2) = gaps(c);
                        let (mj, mc) = (a1 + a2, c1 + c2);
                        mj < mc - 1e-15 || (mj <= mc + 1e-15 && f[j] > f[c])
                    };
                    let mut chosen = None;
                    for &j in admissible.iter().filter(|&&j| f[j] >= ff - tol_f) {
                        if better(j, chosen) {
                            chosen = Some(j);
                        }
                    }
                    let failed = chosen.is_none();
                    if failed {
                        for &j in &admissible {
                            if better(j, chosen) {
                                chosen = Some(j);
                            }
                        }
                    }
                    let atom = chosen.unwrap_or(0);
                    let (drift_gap, diffusion_gap) = gaps(atom);
                    NodeChoice {
                        atom,
                        drift_gap,
                        diffusion_gap,
                        surplus: f[atom] - ff,
                        failed,
                    }
                })
                .collect()
        })
        .collect();

    let mut report = GapReport {
        max_drift_mismatch: 0.0,
        max_diffusion_mismatch: 0.0,
        min_f_surplus: f64::INFINITY,
        failed_nodes: 0,
        failed: false,
        value_loss_bound: 0.0,
        relaxed_value: 0.0,
        strict_value: 0.0,
    };
    let mut actions = Vec::with_capacity(steps * nodes);
    for (k, slice) in slices.iter().enumerate() {
        let next = relaxed_values.slice(k + 1);
        let mut worst_disadvantage = 0.0f64;
        for (i, c) in slice.iter().enumerate() {
            actions.push(c.atom);
            report.max_drift_mismatch = report.max_drift_mismatch.max(c.drift_gap);
            report.max_diffusion_mismatch = report.max_diffusion_mismatch.max(c.diffusion_gap);
            report.min_f_surplus = report.min_f_surplus.min(c.surplus);
            report.failed_nodes += usize::from(c.failed);
            let advantage = problem.q_value(k, i, c.atom, next) - relaxed_values.value(k, i);
            worst_disadvantage = worst_disadvantage.max(-advantage);
        }
        report.value_loss_bound += worst_disadvantage;
    }
    report.failed = report.failed_nodes > 0;
    let strict = StrictPolicy::new(steps, nodes, actions)?;
    let strict_values = evaluate_policy(problem, &strict.to_relaxed(atoms))?;
    let initial = problem.initial();
    report.relaxed_value = initial.iter().zip(relaxed_values.slice(0)).map(|(m, v)| m * v).sum();
    report.strict_value = initial.iter().zip(strict_values.slice(0)).map(|(m, v)| m * v).sum();
    Ok((strict, report))
}

/// A relaxed or strict Markov policy on the lattice.
#[derive(Debug, Clone, Copy)]
pub enum PolicyRef<'a> {
    Relaxed(&'a RelaxedPolicy),
    Strict(&'a StrictPolicy),
}

/// Simulated trajectories `x_0..x_N` for paths `first_path..first_path + n_paths`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub seed: u64,
    pub first_path: u64,
    pub n_paths: usize,
    pub steps: usize,
    pub dimension: usize,
    states: Vec<f64>,
}

impl PathBundle {
    pub fn state(&self, path: usize, k: usize) -> &[f64] {
        let d = self.dimension;
        let at = (path * (self.steps + 1) + k) * d;
        &self.states[at..at + d]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let w = (self.steps + 1) * self.dimension;
        &self.states[path * w..(path + 1) * w]
    }
}

/// Euler scheme: per step, sample `a ~ q_t(node nearest X_t)`, then
/// `X ← X + b Δt + σ √Δt Z`. Each path draws from its own ChaCha stream.
pub fn simulate(
    model: &MfgModel,
    flow: &MeasureFlow,
    lattice: &StateLattice,
    grid: &TimeGrid,
    policy: PolicyRef<'_>,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    simulate_range(model, flow, lattice, grid, policy, 0, n_paths, seed)
}

/// [`simulate`] for the path ids `first_path..first_path + n_paths`, so large
/// runs can be split into chunks with identical results.
#[allow(clippy::too_many_arguments)]
pub fn simulate_range(
    model: &MfgModel,
    flow: &MeasureFlow,
    lattice: &StateLattice,
    grid: &TimeGrid,
    policy: PolicyRef<'_>,
    first_path: u64,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(MfgError::InvalidArgument("n_paths must be at least 1".into()));
    }
    if !grid.matches(flow.times()) {
        return Err(MfgError::TimeGridMismatch(
            "flow times do not match the time grid".into(),
        ));
    }
    let (steps, nodes) = match policy {
        PolicyRef::Relaxed(q) => (q.steps(), q.nodes()),
        PolicyRef::Strict(s) => (s.steps(), s.nodes()),
    };
    if steps != grid.steps() || nodes != lattice.len() {
        return Err(MfgError::TimeGridMismatch(
            "policy does not live on the lattice and grid".into(),
        ));
    }
    let d = model.dimension();
    let m = model.noise_dimension();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let pops: Vec<Population<'_>> = flow.marginals().iter().map(Population::new).collect();
    let lambda = model.initial_law();
    let controls = model.controls();
    let coeffs = model.coefficients();
    let paths: Vec<Vec<f64>> = (first_path..first_path + n_paths as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            let mut out = Vec::with_capacity((steps + 1) * d);
            let mut x = lambda.point(sample_index(&mut rng, lambda.masses())).to_vec();
            out.extend_from_slice(&x);
            let mut b = vec![0.0; d];
            let mut sigma = vec![0.0; d * m];
            let mut z = vec![0.0; m];
            for k in 0..steps {
                let node = lattice.nearest(&x);
                let j = match policy {
                    PolicyRef::Strict(s) => s.action(k, node),
                    PolicyRef::Relaxed(q) => sample_index(&mut rng, q.distribution(k, node)),
                };
                let a = controls.atom(j);
                let t = grid.time(k);
                coeffs.drift(t, &x, &pops[k], a, &mut b);
                coeffs.volatility(t, &x, &pops[k], a, &mut sigma);
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                for r in 0..d {
                    let noise: f64 = (0..m).map(|c| sigma[r * m + c] * z[c]).sum();
                    x[r] += b[r] * dt + noise * sqrt_dt;
                }
                out.extend_from_slice(&x);
            }
            out
        })
        .collect();
    Ok(PathBundle {
        seed,
        first_path,
        n_paths,
        steps,
        dimension: d,
        states: paths.concat(),
    })
}

/// Path dump: a `# seed=` comment, a header, then one row per `(path, step)`.
pub fn dump_paths(bundle: &PathBundle) -> String {
    let mut out = format!("# seed={}\npath,time_index", bundle.seed);
    for i in 0..bundle.dimension {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for p in 0..bundle.n_paths {
        for k in 0..=bundle.steps {
            out.push_str(&format!("{},{k}", bundle.first_path + p as u64));
            for v in bundle.state(p, k) {
                out.push(',');
                out.push_str(&format_float(*v));
            }
            out.push('\n');
        }
    }
    out
}

/// Path counts per nearest lattice node, per step, as fractions of `n_paths`.
pub fn empirical_marginals(bundle: &PathBundle, lattice: &StateLattice) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; lattice.len()]; bundle.steps + 1];
    let w = 1.0 / bundle.n_paths as f64;
    for p in 0..bundle.n_paths {
        for (k, row) in out.iter_mut().enumerate() {
            row[lattice.nearest(bundle.state(p, k))] += w;
        }
    }
    out
}
