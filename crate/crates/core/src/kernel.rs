//! Discretization: state lattices, time grids, Markov-chain transition
//! kernels consistent with the controlled generator, and control truncation.
//!
//! The kernel uses an upwind stencil per axis,
//!
//! ```text
//! p₊ = σ²Δt/(2h²) + b⁺Δt/h,   p₋ = σ²Δt/(2h²) + b⁻Δt/h,   p₀ = 1 − p₊ − p₋,
//! ```
//!
//! so interior rows have mean displacement `bΔt` and second moment
//! `σ²Δt + h|b|Δt`. Boundary nodes project: mass that would leave the lattice
//! stays put. In two dimensions `σσᵀ` must be diagonal and rows are products of
//! the per-axis stencils.

use rayon::prelude::*;

use crate::control::RelaxedPolicy;
use crate::error::{MfgError, Result};
use crate::measures::{DiscreteMeasure, MeasureFlow};
use crate::model::{ControlSpace, MfgModel, Population};

/// Tolerance for recognising a point as a lattice node, in units of `h`.
const NODE_TOLERANCE: f64 = 1e-9;

/// A uniform grid on a box in ℝ^d, `d ∈ {1, 2}`, indexed row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLattice {
    lower: Vec<f64>,
    upper: Vec<f64>,
    widths: Vec<f64>,
    counts: Vec<usize>,
    nodes: Vec<f64>,
}

impl StateLattice {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, widths: Vec<f64>) -> Result<Self> {
        let d = lower.len();
        if !(1..=2).contains(&d) {
            return Err(MfgError::UnsupportedModel(format!(
                "lattices must have dimension 1 or 2, got {d}"
            )));
        }
        if upper.len() != d || widths.len() != d {
            return Err(MfgError::DimensionMismatch {
                expected: d,
                found: if upper.len() != d { upper.len() } else { widths.len() },
            });
        }
        let mut counts = Vec::with_capacity(d);
        for axis in 0..d {
            let (lo, hi, h) = (lower[axis], upper[axis], widths[axis]);
            if !(lo.is_finite() && hi.is_finite() && h.is_finite() && h > 0.0 && hi > lo) {
                return Err(MfgError::InvalidArgument(format!(
                    "axis {axis}: need finite lower < upper and h > 0, got [{lo}, {hi}] with h = {h}"
                )));
            }
            let cells = (hi - lo) / h;
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-6 {
                return Err(MfgError::InvalidArgument(format!(
                    "axis {axis}: width {} is not a multiple of h = {h}",
                    hi - lo
                )));
            }
            let count = rounded as usize + 1;
            if count < 3 {
                return Err(MfgError::InvalidArgument(format!(
                    "axis {axis}: at least 3 nodes required, got {count}"
                )));
            }
            counts.push(count);
        }
        let total: usize = counts.iter().product();
        let mut nodes = Vec::with_capacity(total * d);
        for flat in 0..total {
            let mut rem = flat;
            let mut coords = [0.0; 2];
            for axis in (0..d).rev() {
                let k = rem % counts[axis];
                rem /= counts[axis];
                coords[axis] = lower[axis] + k as f64 * widths[axis];
            }
            nodes.extend_from_slice(&coords[..d]);
        }
        Ok(Self {
            lower,
            upper,
            widths,
            counts,
            nodes,
        })
    }

    /// A one-dimensional lattice.
    pub fn uniform(lower: f64, upper: f64, h: f64) -> Result<Self> {
        Self::new(vec![lower], vec![upper], vec![h])
    }

    pub fn dimension(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len() / self.dimension()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.lower[axis]
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.upper[axis]
    }

    pub fn widths(&self) -> Vec<f64> {
        self.widths.clone()
    }

    pub fn axis_len(&self, axis: usize) -> usize {
        self.counts[axis]
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let d = self.dimension();
        &self.nodes[i * d..(i + 1) * d]
    }

    pub fn multi_index(&self, i: usize) -> Vec<usize> {
        let d = self.dimension();
        let mut out = vec![0; d];
        let mut rem = i;
        for axis in (0..d).rev() {
            out[axis] = rem % self.counts[axis];
            rem /= self.counts[axis];
        }
        out
    }

    /// Flat index of an in-range multi-index.
    pub fn flat_index(&self, multi: &[i64]) -> usize {
        multi
            .iter()
            .zip(&self.counts)
            .fold(0usize, |acc, (&k, &n)| acc * n + k as usize)
    }

    /// The node equal to `point` (up to rounding), if any.
    pub fn index_of(&self, point: &[f64]) -> Option<usize> {
        if point.len() != self.dimension() {
            return None;
        }
        let mut multi = [0i64; 2];
        for (axis, &x) in point.iter().enumerate() {
            let u = (x - self.lower[axis]) / self.widths[axis];
            let k = u.round();
            if (u - k).abs() > NODE_TOLERANCE || k < 0.0 || k >= self.counts[axis] as f64 {
                return None;
            }
            multi[axis] = k as i64;
        }
        Some(self.flat_index(&multi[..self.dimension()]))
    }

    /// The node nearest to `point`, clamping outside the box.
    pub fn nearest(&self, point: &[f64]) -> usize {
        let mut multi = [0i64; 2];
        for (axis, &x) in point.iter().enumerate().take(self.dimension()) {
            let u = ((x - self.lower[axis]) / self.widths[axis]).round();
            multi[axis] = u.clamp(0.0, (self.counts[axis] - 1) as f64) as i64;
        }
        self.flat_index(&multi[..self.dimension()])
    }

    /// Whether node `i` touches the boundary of the box.
    pub fn is_boundary(&self, i: usize) -> bool {
        self.multi_index(i)
            .iter()
            .zip(&self.counts)
            .any(|(&k, &n)| k == 0 || k + 1 == n)
    }

    /// Node masses to a measure; zero-mass nodes (and rounding-level negatives) are dropped.
    pub fn measure_from_dense(&self, masses: &[f64]) -> Result<DiscreteMeasure> {
        if masses.len() != self.len() {
            return Err(MfgError::InvalidArgument(format!(
                "{} masses for {} lattice nodes",
                masses.len(),
                self.len()
            )));
        }
        let d = self.dimension();
        let mut points = Vec::new();
        let mut kept = Vec::new();
        for (i, &m) in masses.iter().enumerate() {
            if m > 0.0 {
                points.extend_from_slice(self.node(i));
                kept.push(m);
            } else if m < -1e-12 {
                return Err(MfgError::InvalidMeasure(format!("negative node mass {m}")));
            }
        }
        DiscreteMeasure::from_flat(d, points, kept)
    }

    /// A lattice-supported measure as node masses.
    pub fn dense_from_measure(&self, mu: &DiscreteMeasure) -> Result<Vec<f64>> {
        if mu.dimension() != self.dimension() {
            return Err(MfgError::DimensionMismatch {
                expected: self.dimension(),
                found: mu.dimension(),
            });
        }
        let mut dense = vec![0.0; self.len()];
        for (x, m) in mu.iter() {
            let i = self.index_of(x).ok_or_else(|| {
                MfgError::InvalidArgument(format!("atom {x:?} is not a lattice node"))
            })?;
            dense[i] += m;
        }
        Ok(dense)
    }
}

/// `N` equal steps on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(MfgError::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(MfgError::InvalidArgument("time grid needs N >= 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// The `N + 1` grid times.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    pub fn matches(&self, times: &[f64]) -> bool {
        times.len() == self.steps + 1
            && times
                .iter()
                .enumerate()
                .all(|(k, &t)| (t - self.time(k)).abs() <= 1e-12 * self.horizon.max(1.0))
    }
}

/// Piecewise-constant resampling of a flow onto `grid`: each grid time takes the
/// latest marginal at or before it.
pub fn resample_flow(flow: &MeasureFlow, grid: &TimeGrid) -> Result<MeasureFlow> {
    let src = flow.times();
    let marginals = grid
        .times()
        .iter()
        .map(|&t| {
            let k = src.partition_point(|&s| s <= t + 1e-12).max(1) - 1;
            flow.marginal(k).clone()
        })
        .collect();
    MeasureFlow::new(grid.times(), marginals)
}

/// What to do when a stencil would need a negative stay probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CflPolicy {
    /// Fail on the first offending `(t, x, a)`.
    #[default]
    Error,
    /// Mark offending controls inadmissible at that `(t, x)`; fail only when a
    /// node would be left without any admissible control.
    RestrictControls,
}

/// Sparse transition rows for every `(time step, node, atom)`.
///
/// An empty row marks an inadmissible control (see [`CflPolicy::RestrictControls`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    steps: usize,
    nodes: usize,
    atoms: usize,
    offsets: Vec<usize>,
    targets: Vec<u32>,
    probs: Vec<f64>,
}

impl TransitionKernel {
    /// Assembles a kernel from explicit rows ordered by `(k, i, j)`.
    pub fn from_rows(
        steps: usize,
        nodes: usize,
        atoms: usize,
        rows: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        if rows.len() != steps * nodes * atoms {
            return Err(MfgError::InvalidArgument(format!(
                "{} rows for {steps} steps × {nodes} nodes × {atoms} atoms",
                rows.len()
            )));
        }
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut targets = Vec::new();
        let mut probs = Vec::new();
        offsets.push(0);
        for (r, row) in rows.into_iter().enumerate() {
            let total: f64 = row.iter().map(|e| e.1).sum();
            if !row.is_empty() && (total - 1.0).abs() > 1e-12 {
                return Err(MfgError::InvalidArgument(format!(
                    "row {r} sums to {total}"
                )));
            }
            for (target, p) in row {
                if target >= nodes || !(p >= 0.0) {
                    return Err(MfgError::InvalidArgument(format!(
                        "row {r}: bad entry ({target}, {p})"
                    )));
                }
                targets.push(target as u32);
                probs.push(p);
            }
            offsets.push(targets.len());
        }
        Ok(Self {
            steps,
            nodes,
            atoms,
            offsets,
            targets,
            probs,
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

    fn row_index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.nodes + i) * self.atoms + j
    }

    /// Targets and probabilities of the row for `(k, i, j)`.
    pub fn row(&self, k: usize, i: usize, j: usize) -> (&[u32], &[f64]) {
        let r = self.row_index(k, i, j);
        let (lo, hi) = (self.offsets[r], self.offsets[r + 1]);
        (&self.targets[lo..hi], &self.probs[lo..hi])
    }

    pub fn is_admissible(&self, k: usize, i: usize, j: usize) -> bool {
        let r = self.row_index(k, i, j);
        self.offsets[r + 1] > self.offsets[r]
    }

    /// Smallest admissible atom index at `(k, i)`.
    pub fn first_admissible(&self, k: usize, i: usize) -> Option<usize> {
        (0..self.atoms).find(|&j| self.is_admissible(k, i, j))
    }

    /// `Σ_{x′} K(x′ | i, j) v(x′)`.
    pub fn expectation(&self, k: usize, i: usize, j: usize, v: &[f64]) -> f64 {
        let (t, p) = self.row(k, i, j);
        t.iter().zip(p).map(|(&x, &w)| w * v[x as usize]).sum()
    }

    /// Calls `f(j, Σ_{x′} K(x′ | i, j) v(x′))` for every admissible atom `j` at `(k, i)`.
    pub(crate) fn for_each_expectation(&self, k: usize, i: usize, v: &[f64], mut f: impl FnMut(usize, f64)) {
        let r0 = self.row_index(k, i, 0);
        let offsets = &self.offsets[r0..=r0 + self.atoms];
        for j in 0..self.atoms {
            let (lo, hi) = (offsets[j], offsets[j + 1]);
            if lo == hi {
                continue;
            }
            let acc = self.targets[lo..hi]
                .iter()
                .zip(&self.probs[lo..hi])
                .map(|(&x, &w)| w * v[x as usize])
                .sum();
            f(j, acc);
        }
    }

    /// Adds `mass · K(· | i, j)` into `out`.
    pub fn scatter(&self, k: usize, i: usize, j: usize, mass: f64, out: &mut [f64]) {
        let (t, p) = self.row(k, i, j);
        for (&x, &w) in t.iter().zip(p) {
            out[x as usize] += mass * w;
        }
    }

    /// One forward step of node masses under a relaxed policy.
    pub fn push_dense(&self, k: usize, masses: &[f64], policy: &RelaxedPolicy) -> Result<Vec<f64>> {
        if k >= self.steps || k >= policy.steps() {
            return Err(MfgError::TimeGridMismatch(format!(
                "policy time index {k} out of range 0..{}",
                self.steps.min(policy.steps())
            )));
        }
        if masses.len() != self.nodes || policy.nodes() != self.nodes || policy.atoms() != self.atoms {
            return Err(MfgError::InvalidArgument(
                "policy, masses and kernel disagree on the grid".into(),
            ));
        }
        let mut out = vec![0.0; self.nodes];
        for (i, &m) in masses.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (j, &q) in policy.distribution(k, i).iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                if !self.is_admissible(k, i, j) {
                    return Err(MfgError::InvalidArgument(format!(
                        "policy uses inadmissible atom {j} at step {k}, node {i}"
                    )));
                }
                self.scatter(k, i, j, m * q, &mut out);
            }
        }
        Ok(out)
    }
}

/// Per-axis stencil `(down, stay, up)`, or the admissible `Δt` bound when
/// `stay` would be negative.
fn stencil(s: f64, b: f64, h: f64, dt: f64) -> std::result::Result<[f64; 3], f64> {
    let lam = s * dt / (2.0 * h * h);
    let up = lam + b.max(0.0) * dt / h;
    let down = lam + (-b).max(0.0) * dt / h;
    let stay = 1.0 - up - down;
    if stay < -1e-12 {
        Err(h * h / (s + h * b.abs()))
    } else {
        // Rounding residue of an exactly vanishing stay probability.
        Ok([down, if stay.abs() < 1e-14 { 0.0 } else { stay }, up])
    }
}

struct Slice {
    lens: Vec<usize>,
    targets: Vec<u32>,
    probs: Vec<f64>,
}

/// Builds the transition kernel against `flow`, whose times must match `grid`.
pub fn build_kernel(
    model: &MfgModel,
    flow: &MeasureFlow,
    lattice: &StateLattice,
    grid: &TimeGrid,
    cfl: CflPolicy,
) -> Result<TransitionKernel> {
    let d = lattice.dimension();
    if model.dimension() != d {
        return Err(MfgError::DimensionMismatch {
            expected: d,
            found: model.dimension(),
        });
    }
    if !grid.matches(flow.times()) {
        return Err(MfgError::TimeGridMismatch(format!(
            "flow has {} times, grid expects {} on [0, {}]",
            flow.len(),
            grid.steps() + 1,
            grid.horizon()
        )));
    }
    let slices: Vec<Result<Slice>> = (0..grid.steps())
        .into_par_iter()
        .map(|k| build_slice(model, flow.marginal(k), lattice, grid.time(k), grid.dt(), cfl))
        .collect();
    let atoms = model.controls().len();
    let nodes = lattice.len();
    let mut offsets = Vec::with_capacity(grid.steps() * nodes * atoms + 1);
    offsets.push(0);
    let (mut targets, mut probs) = (Vec::new(), Vec::new());
    for slice in slices {
        let slice = slice?;
        for len in slice.lens {
            offsets.push(offsets.last().unwrap() + len);
        }
        targets.extend(slice.targets);
        probs.extend(slice.probs);
    }
    Ok(TransitionKernel {
        steps: grid.steps(),
        nodes,
        atoms,
        offsets,
        targets,
        probs,
    })
}

fn build_slice(
    model: &MfgModel,
    mu: &DiscreteMeasure,
    lattice: &StateLattice,
    t: f64,
    dt: f64,
    cfl: CflPolicy,
) -> Result<Slice> {
    let d = lattice.dimension();
    let pop = Population::new(mu);
    let coeffs = model.coefficients();
    let controls = model.controls();
    let (nodes, atoms) = (lattice.len(), controls.len());
    let mut slice = Slice {
        lens: Vec::with_capacity(nodes * atoms),
        targets: Vec::with_capacity(nodes * atoms * 3),
        probs: Vec::with_capacity(nodes * atoms * 3),
    };
    let mut b = [0.0; 2];
    let mut s = [0.0; 4];
    for i in 0..nodes {
        let x = lattice.node(i);
        let multi = lattice.multi_index(i);
        let mut any = false;
        let mut first_violation = None;
        for j in 0..atoms {
            let a = controls.atom(j);
            coeffs.drift(t, x, &pop, a, &mut b[..d]);
            coeffs.diffusion(t, x, &pop, a, &mut s[..d * d]);
            if b[..d].iter().chain(&s[..d * d]).any(|v| !v.is_finite()) {
                return Err(MfgError::NonFinite {
                    t,
                    x: x.to_vec(),
                    a: a.to_vec(),
                });
            }
            if d == 2 && s[1].abs().max(s[2].abs()) > 1e-12 * (1.0 + s[0].abs() + s[3].abs()) {
                return Err(MfgError::UnsupportedModel(format!(
                    "non-diagonal diffusion at t={t}, x={x:?}, a={a:?}"
                )));
            }
            let mut axes = [[0.0; 3]; 2];
            let mut violation = None;
            for axis in 0..d {
                let h = lattice.widths[axis];
                match stencil(s[axis * d + axis], b[axis], h, dt) {
                    Ok(mut w) => {
                        if multi[axis] == 0 {
                            w[1] += w[0];
                            w[0] = 0.0;
                        }
                        if multi[axis] + 1 == lattice.counts[axis] {
                            w[1] += w[2];
                            w[2] = 0.0;
                        }
                        axes[axis] = w;
                    }
                    Err(max_dt) => {
                        violation = Some(violation.map_or(max_dt, |m: f64| m.min(max_dt)));
                    }
                }
            }
            if let Some(max_dt) = violation {
                let err = MfgError::CflViolation {
                    t,
                    x: x.to_vec(),
                    a: a.to_vec(),
                    dt,
                    max_dt,
                };
                if cfl == CflPolicy::Error {
                    return Err(err);
                }
                first_violation.get_or_insert(err);
                slice.lens.push(0);
                continue;
            }
            any = true;
            let before = slice.targets.len();
            if d == 1 {
                for (o, &w) in axes[0].iter().enumerate() {
                    if w > 0.0 {
                        slice.targets.push((multi[0] + o - 1) as u32);
                        slice.probs.push(w);
                    }
                }
            } else {
                for (o0, &w0) in axes[0].iter().enumerate() {
                    for (o1, &w1) in axes[1].iter().enumerate() {
                        let w = w0 * w1;
                        if w > 0.0 {
                            let target = lattice.flat_index(&[
                                (multi[0] + o0) as i64 - 1,
                                (multi[1] + o1) as i64 - 1,
                            ]);
                            slice.targets.push(target as u32);
                            slice.probs.push(w);
                        }
                    }
                }
            }
            slice.lens.push(slice.targets.len() - before);
        }
        if !any {
            return Err(first_violation.expect("a node without admissible atoms had a violation"));
        }
    }
    Ok(slice)
}

/// `h²/(σ²_max + h·|b|_max)` over the sample `(t, x, a)`, with coefficients
/// evaluated against `mu`; the minimum over axes in two dimensions.
pub fn cfl_max_dt(
    model: &MfgModel,
    lattice: &StateLattice,
    mu: &DiscreteMeasure,
    sample: &[(f64, Vec<f64>, Vec<f64>)],
) -> f64 {
    let d = lattice.dimension();
    let pop = Population::new(mu);
    let mut s_max = vec![0.0f64; d];
    let mut b_max = vec![0.0f64; d];
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * d];
    for (t, x, a) in sample {
        model.coefficients().drift(*t, x, &pop, a, &mut b);
        model.coefficients().diffusion(*t, x, &pop, a, &mut s);
        for axis in 0..d {
            s_max[axis] = s_max[axis].max(s[axis * d + axis]);
            b_max[axis] = b_max[axis].max(b[axis].abs());
        }
    }
    (0..d)
        .map(|axis| {
            let h = lattice.widths[axis];
            h * h / (s_max[axis] + h * b_max[axis])
        })
        .fold(f64::INFINITY, f64::min)
}

/// Truncation radius `r_n = √(n / (2c₁))`.
pub fn truncation_radius(n: u32, c1: f64) -> f64 {
    (n as f64 / (2.0 * c1)).sqrt()
}

/// Keeps the atoms with `|a| ≤ r_n`.
pub fn truncate_controls(space: &ControlSpace, n: u32, c1: f64) -> Result<ControlSpace> {
    let radius = truncation_radius(n, c1);
    space
        .filtered(
            |a| crate::measures::norm(a) <= radius * (1.0 + 1e-12),
            space.bound().min(radius),
        )
        .ok_or(MfgError::EmptyControlSet { n, radius })
}

/// One forward Kolmogorov step of a lattice-supported marginal at step `k`.
pub fn push_forward(
    kernel: &TransitionKernel,
    lattice: &StateLattice,
    marginal: &DiscreteMeasure,
    policy: &RelaxedPolicy,
    k: usize,
) -> Result<DiscreteMeasure> {
    let dense = lattice.dense_from_measure(marginal)?;
    lattice.measure_from_dense(&kernel.push_dense(k, &dense, policy)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::StrictPolicy;
    use crate::model::{FnCoefficients, GrowthConstants};
    use std::sync::Arc;

    fn model(b: f64, sigma: f64, atoms: &[f64]) -> MfgModel {
        let controls = ControlSpace::new(
            atoms.iter().map(|&a| vec![a]).collect(),
            atoms.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(1.0),
            true,
        )
        .unwrap();
        MfgModel::new(
            1.0,
            DiscreteMeasure::dirac(&[0.0]),
            GrowthConstants::new(1.0, 1.0, 1.0, 2.0, 2.0, 0.0).unwrap(),
            controls,
            Arc::new(FnCoefficients::scalar(
                move |_, _, _, a| b + a,
                move |_, _, _, _| sigma,
                |_, _, _, _| 0.0,
                |_, _| 0.0,
            )),
        )
        .unwrap()
    }

    fn kernel_for(model: &MfgModel, lattice: &StateLattice, grid: &TimeGrid) -> Result<TransitionKernel> {
        let flow = MeasureFlow::constant(grid.times(), model.initial_law()).unwrap();
        build_kernel(model, &flow, lattice, grid, CflPolicy::Error)
    }

    fn row_dense(k: &TransitionKernel, t: usize, i: usize, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; k.nodes()];
        k.scatter(t, i, j, 1.0, &mut out);
        out
    }

    #[test]
    fn lattice_indexing() {
        let l = StateLattice::new(vec![-1.0, 0.0], vec![1.0, 2.0], vec![0.5, 1.0]).unwrap();
        assert_eq!(l.len(), 15);
        assert_eq!(l.node(7), &[0.0, 1.0]);
        assert_eq!(l.multi_index(7), vec![2, 1]);
        assert_eq!(l.index_of(&[0.0, 1.0]), Some(7));
        assert_eq!(l.index_of(&[0.1, 1.0]), None);
        assert_eq!(l.nearest(&[9.0, -3.0]), l.flat_index(&[4, 0]));
        assert!(l.is_boundary(0) && !l.is_boundary(7));
        assert!(StateLattice::uniform(0.0, 0.1, 0.1).is_err());
        assert!(StateLattice::uniform(0.0, 1.0, 0.3).is_err());
    }

    #[test]
    fn degenerate_diffusion_keeps_every_row_in_place() {
        let m = model(0.0, 0.0, &[0.0]);
        let lattice = StateLattice::uniform(-1.0, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let k = kernel_for(&m, &lattice, &grid).unwrap();
        for t in 0..4 {
            for i in 0..lattice.len() {
                assert_eq!(k.row(t, i, 0), (&[i as u32][..], &[1.0][..]));
            }
        }
    }

    #[test]
    fn unit_courant_number_splits_evenly() {
        // σ²Δt/h² = 1 with σ = 1, h = 0.1, Δt = 0.01.
        let m = model(0.0, 1.0, &[0.0]);
        let lattice = StateLattice::uniform(-1.0, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(0.01, 1).unwrap();
        let k = kernel_for(&m, &lattice, &grid).unwrap();
        let row = row_dense(&k, 0, 10, 0);
        assert!((row[9] - 0.5).abs() < 1e-15 && (row[11] - 0.5).abs() < 1e-15);
        assert_eq!(row[10], 0.0);
    }

    #[test]
    fn drift_stencil_values() {
        let m = model(1.0, 1.0, &[0.0]);
        let lattice = StateLattice::uniform(-1.0, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(0.004, 1).unwrap();
        let k = kernel_for(&m, &lattice, &grid).unwrap();
        let row = row_dense(&k, 0, 10, 0);
        assert!((row[11] - 0.24).abs() < 1e-15);
        assert!((row[9] - 0.2).abs() < 1e-15);
        assert!((row[10] - 0.56).abs() < 1e-15);
    }

    #[test]
    fn interior_rows_are_locally_consistent() {
        let atoms: Vec<f64> = (0..9).map(|j| -2.0 + 0.5 * j as f64).collect();
        let m = model(0.3, 0.7, &atoms);
        let lattice = StateLattice::uniform(-1.0, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let dt = grid.dt();
        let k = kernel_for(&m, &lattice, &grid).unwrap();
        for i in 1..lattice.len() - 1 {
            for (j, &a) in atoms.iter().enumerate() {
                let (t, p) = k.row(3, i, j);
                let x = lattice.node(i)[0];
                let mean: f64 = t.iter().zip(p).map(|(&y, w)| w * (lattice.node(y as usize)[0] - x)).sum();
                let second: f64 = t
                    .iter()
                    .zip(p)
                    .map(|(&y, w)| w * (lattice.node(y as usize)[0] - x).powi(2))
                    .sum();
                let b = 0.3 + a;
                assert!((mean - b * dt).abs() < 1e-14);
                assert!((second - (0.49 * dt + 0.1 * b.abs() * dt)).abs() < 1e-14);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cfl_violation_reports_location_and_bound() {
        let m = model(0.0, 1.0, &[-1.0, 0.0, 1.0]);
        let lattice = StateLattice::uniform(-1.0, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        match kernel_for(&m, &lattice, &grid).unwrap_err() {
            MfgError::CflViolation { t, x, a, dt, max_dt } => {
                assert_eq!((t, x, a), (0.0, vec![-1.0], vec![-1.0]));
                assert_eq!(dt, 0.01);
                assert!((max_dt - 0.01 / 1.1).abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
        let flow = MeasureFlow::constant(grid.times(), m.initial_law()).unwrap();
        let k = build_kernel(&m, &flow, &lattice, &grid, CflPolicy::RestrictControls).unwrap();
        assert!(!k.is_admissible(0, 5, 0) && k.is_admissible(0, 5, 1) && !k.is_admissible(0, 5, 2));
        assert_eq!(k.first_admissible(7, 3), Some(1));
    }

    #[test]
    fn cfl_bound_examples() {
        let lattice = StateLattice::uniform(-1.0, 1.0, 0.1).unwrap();
        let mu = DiscreteMeasure::dirac(&[0.0]);
        let sample = |atoms: &[f64]| -> Vec<(f64, Vec<f64>, Vec<f64>)> {
            atoms.iter().map(|&a| (0.0, vec![0.0], vec![a])).collect()
        };
        let m = model(0.0, 1.0, &[-1.0, 0.5, 1.0]);
        assert!((cfl_max_dt(&m, &lattice, &mu, &sample(&[-1.0, 0.5, 1.0])) - 0.01 / 1.1).abs() < 1e-15);
        let m = model(0.0, 0.0, &[-2.0, 2.0]);
        assert!((cfl_max_dt(&m, &lattice, &mu, &sample(&[-2.0, 2.0])) - 0.05).abs() < 1e-15);
        let coarse = StateLattice::uniform(-1.0, 1.0, 0.2).unwrap();
        let m = model(0.0, 2.0, &[0.0]);
        assert!((cfl_max_dt(&m, &coarse, &mu, &sample(&[0.0])) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn non_diagonal_diffusion_is_rejected_in_two_dimensions() {
        let coeffs = FnCoefficients::new(
            2,
            2,
            |_, _, _, _, out| out.fill(0.0),
            |_, _, _, _, out| out.copy_from_slice(&[0.1, 0.1, 0.0, 0.1]),
            |_, _, _, _| 0.0,
            |_, _| 0.0,
        );
        let m = MfgModel::new(
            1.0,
            DiscreteMeasure::dirac(&[0.0, 0.0]),
            GrowthConstants::new(1.0, 1.0, 1.0, 2.0, 2.0, 0.0).unwrap(),
            ControlSpace::new(vec![vec![0.0]], 1.0, true).unwrap(),
            Arc::new(coeffs),
        )
        .unwrap();
        let lattice = StateLattice::new(vec![-1.0; 2], vec![1.0; 2], vec![0.5; 2]).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        assert!(matches!(
            kernel_for(&m, &lattice, &grid),
            Err(MfgError::UnsupportedModel(_))
        ));
    }

    #[test]
    fn two_dimensional_rows_are_products() {
        let coeffs = FnCoefficients::new(
            2,
            2,
            |_, _, _, a, out| out.copy_from_slice(a),
            |_, _, _, _, out| out.copy_from_slice(&[0.3, 0.0, 0.0, 0.2]),
            |_, _, _, _| 0.0,
            |_, _| 0.0,
        );
        let m = MfgModel::new(
            1.0,
            DiscreteMeasure::dirac(&[0.0, 0.0]),
            GrowthConstants::new(1.0, 1.0, 1.0, 2.0, 2.0, 0.0).unwrap(),
            ControlSpace::new(vec![vec![0.5, -1.0]], 2.0, true).unwrap(),
            Arc::new(coeffs),
        )
        .unwrap();
        let lattice = StateLattice::new(vec![-1.0; 2], vec![1.0; 2], vec![0.25; 2]).unwrap();
        let grid = TimeGrid::new(0.1, 5).unwrap();
        let k = kernel_for(&m, &lattice, &grid).unwrap();
        let centre = lattice.index_of(&[0.0, 0.0]).unwrap();
        let (t, p) = k.row(0, centre, 0);
        let dt = grid.dt();
        let mean: Vec<f64> = (0..2)
            .map(|axis| {
                t.iter()
                    .zip(p)
                    .map(|(&y, w)| w * lattice.node(y as usize)[axis])
                    .sum()
            })
            .collect();
        assert!((mean[0] - 0.5 * dt).abs() < 1e-15 && (mean[1] + dt).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn push_forward_examples() {
        let m = model(0.0, 1.0, &[0.0]);
        let lattice = StateLattice::uniform(-1.0, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(0.02, 2).unwrap();
        let k = kernel_for(&m, &lattice, &grid).unwrap();
        let policy = StrictPolicy::constant(2, lattice.len(), 0).to_relaxed(1);
        let one = push_forward(&k, &lattice, &DiscreteMeasure::dirac(&[0.0]), &policy, 0).unwrap();
        let two = push_forward(&k, &lattice, &one, &policy, 1).unwrap();
        let dense = lattice.dense_from_measure(&two).unwrap();
        // Hand convolution of (½, 0, ½) with itself.
        assert!((dense[8] - 0.25).abs() < 1e-15);
        assert!((dense[10] - 0.5).abs() < 1e-15);
        assert!((dense[12] - 0.25).abs() < 1e-15);
        assert!((dense.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(push_forward(&k, &lattice, &one, &policy, 2).is_err());

        let still = model(0.0, 0.0, &[0.0]);
        let k = kernel_for(&still, &lattice, &grid).unwrap();
        let mu = DiscreteMeasure::from_scalars(&[-0.3, 0.5], &[0.4, 0.6]).unwrap();
        let moved = push_forward(&k, &lattice, &mu, &policy, 0).unwrap();
        assert_eq!(
            lattice.dense_from_measure(&moved).unwrap(),
            lattice.dense_from_measure(&mu).unwrap()
        );
    }

    #[test]
    fn truncation_radii() {
        assert_eq!(truncation_radius(8, 1.0), 2.0);
        assert_eq!(truncation_radius(2, 1.0), 1.0);
        let space = ControlSpace::new(
            [0.0, 1.0, -1.0, 3.0, -3.0].iter().map(|&a| vec![a]).collect(),
            3.0,
            true,
        )
        .unwrap();
        let cut = truncate_controls(&space, 2, 1.0).unwrap();
        let kept: Vec<f64> = cut.atoms().map(|a| a[0]).collect();
        assert_eq!(kept, vec![0.0, 1.0, -1.0]);
        let far = ControlSpace::new(vec![vec![3.0]], 3.0, true).unwrap();
        assert!(matches!(
            truncate_controls(&far, 2, 1.0),
            Err(MfgError::EmptyControlSet { n: 2, .. })
        ));
    }

    #[test]
    fn resampling_is_piecewise_constant() {
        let a = DiscreteMeasure::dirac(&[0.0]);
        let b = DiscreteMeasure::dirac(&[1.0]);
        let flow = MeasureFlow::new(vec![0.0, 0.5], vec![a.clone(), b.clone()]).unwrap();
        let out = resample_flow(&flow, &TimeGrid::new(1.0, 4).unwrap()).unwrap();
        assert_eq!(out.marginal(1), &a);
        assert_eq!(out.marginal(2), &b);
        assert_eq!(out.marginal(4), &b);
    }
}
