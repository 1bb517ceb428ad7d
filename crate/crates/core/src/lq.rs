//! The linear-quadratic game `b = a`, `f = −a²`, `g = −(x + c μ̄)²` with
//! constant volatility: closed-form equilibrium means, the Riccati feedback,
//! and an independent finite-difference HJB solver to check that feedback.
//!
//! Mean consistency gives `ᾱ = −(μ̄₀ + c μ̄_T)/(1 + T)` and `μ̄_T = μ̄₀ + ᾱT`,
//! hence `μ̄_T = μ̄₀ / (1 + T + cT)`: no equilibrium exists at the critical
//! coupling `c = −(1 + T)/T` unless `μ̄₀ = 0`.

use std::sync::Arc;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{MfgError, Result};
use crate::control::RelaxedPolicy;
use crate::kernel::{StateLattice, TimeGrid};
use crate::measures::{DiscreteMeasure, MeasureFlow};
use crate::model::{Coefficients, ControlSpace, GrowthConstants, MfgModel, Population};

/// Below this `|1 + T + cT|` the coupling counts as critical.
pub const CRITICAL_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqSpec {
    pub horizon: f64,
    pub coupling: f64,
    pub sigma: f64,
    pub mean0: f64,
    pub var0: f64,
}

impl LqSpec {
    pub fn new(horizon: f64, coupling: f64, sigma: f64, mean0: f64, var0: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(MfgError::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if !(var0 >= 0.0 && sigma >= 0.0) {
            return Err(MfgError::InvalidArgument(
                "variance and volatility must be nonnegative".into(),
            ));
        }
        if !(coupling.is_finite() && mean0.is_finite() && var0.is_finite() && sigma.is_finite()) {
            return Err(MfgError::InvalidArgument("non-finite LQ parameter".into()));
        }
        Ok(Self {
            horizon,
            coupling,
            sigma,
            mean0,
            var0,
        })
    }
}

/// `−(1 + T)/T`.
pub fn critical_c(horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(MfgError::InvalidArgument(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    Ok(-(1.0 + horizon) / horizon)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LqMean {
    Value(f64),
    NoSolution,
}

impl LqMean {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(v),
            Self::NoSolution => None,
        }
    }
}

/// Equilibrium terminal mean `μ̄₀ / (1 + T + cT)`.
pub fn analytic_mean_t(spec: &LqSpec) -> LqMean {
    let denom = 1.0 + spec.horizon + spec.coupling * spec.horizon;
    if denom.abs() > CRITICAL_THRESHOLD {
        LqMean::Value(spec.mean0 / denom)
    } else if spec.mean0 == 0.0 {
        LqMean::Value(0.0)
    } else {
        LqMean::NoSolution
    }
}

/// Mean control `ᾱ = −(μ̄₀ + c·mean_T)/(1 + T)` given a terminal mean.
pub fn analytic_mean_control(spec: &LqSpec, mean_t: f64) -> f64 {
    -(spec.mean0 + spec.coupling * mean_t) / (1.0 + spec.horizon)
}

/// `α*(t, x) = −(x + c·mean_T)/(1 + T − t)`, from `P′ = P²`, `P(T) = 1`.
pub fn analytic_feedback(t: f64, x: f64, spec: &LqSpec, mean_t: f64) -> f64 {
    -(x + spec.coupling * mean_t) / (1.0 + spec.horizon - t)
}

/// Largest `|Σⱼ π(aⱼ | tₖ, xᵢ) aⱼ − α*(tₖ, xᵢ)|` over decision steps `k < N`
/// and nodes carrying at least `min_mass` under `flow` at step `k`.
#[allow(clippy::too_many_arguments)]
pub fn feedback_error(
    spec: &LqSpec,
    lattice: &StateLattice,
    grid: &TimeGrid,
    controls: &ControlSpace,
    flow: &MeasureFlow,
    policy: &RelaxedPolicy,
    mean_t: f64,
    min_mass: f64,
) -> Result<f64> {
    if policy.steps() != grid.steps() || flow.len() != grid.steps() + 1 {
        return Err(MfgError::TimeGridMismatch(format!(
            "policy has {} steps and flow {} marginals on a {}-step grid",
            policy.steps(),
            flow.len(),
            grid.steps()
        )));
    }
    let mut worst = 0.0f64;
    for k in 0..grid.steps() {
        let dense = lattice.dense_from_measure(flow.marginal(k))?;
        let t = grid.time(k);
        for (i, &m) in dense.iter().enumerate() {
            if m < min_mass {
                continue;
            }
            let a = policy.barycenter(k, i, controls)[0];
            let target = analytic_feedback(t, lattice.node(i)[0], spec, mean_t);
            worst = worst.max((a - target).abs());
        }
    }
    Ok(worst)
}

/// The LQ coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqCoefficients {
    coupling: f64,
    sigma: f64,
}

impl LqCoefficients {
    pub fn new(coupling: f64, sigma: f64) -> Self {
        Self { coupling, sigma }
    }
}

impl Coefficients for LqCoefficients {
    fn state_dimension(&self) -> usize {
        1
    }
    fn noise_dimension(&self) -> usize {
        1
    }
    fn drift(&self, _t: f64, _x: &[f64], _mu: &Population<'_>, a: &[f64], out: &mut [f64]) {
        out[0] = a[0];
    }
    fn volatility(&self, _t: f64, _x: &[f64], _mu: &Population<'_>, _a: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }
    fn running_reward(&self, _t: f64, _x: &[f64], _mu: &Population<'_>, a: &[f64]) -> f64 {
        -a[0] * a[0]
    }
    fn terminal_reward(&self, x: &[f64], mu: &Population<'_>) -> f64 {
        let y = x[0] + self.coupling * mu.mean()[0];
        -y * y
    }
    fn dynamics_depend_on_population(&self) -> bool {
        false
    }
    fn running_reward_depends_on_population(&self) -> bool {
        false
    }
}

/// Growth constants the LQ data satisfy with `p = p′ = 2`, `p_σ = 0`.
pub fn lq_constants(spec: &LqSpec) -> GrowthConstants {
    GrowthConstants::new(
        1.0f64.max(spec.sigma * spec.sigma),
        2.0 * 1.0f64.max(spec.coupling * spec.coupling),
        1.0,
        2.0,
        2.0,
        0.0,
    )
    .expect("LQ constants are valid")
}

/// A Gaussian law on a one-dimensional lattice: each node takes the mass of
/// its cell, and the tails are lumped into the end nodes. Zero variance gives
/// a Dirac at the nearest node.
pub fn discretized_gaussian(lattice: &StateLattice, mean: f64, var: f64) -> Result<DiscreteMeasure> {
    if lattice.dimension() != 1 {
        return Err(MfgError::DimensionMismatch {
            expected: 1,
            found: lattice.dimension(),
        });
    }
    let n = lattice.len();
    let mut dense = vec![0.0; n];
    if var == 0.0 {
        dense[lattice.nearest(&[mean])] = 1.0;
    } else {
        let normal = Normal::new(mean, var.sqrt())
            .map_err(|e| MfgError::InvalidArgument(format!("bad gaussian: {e}")))?;
        let h = lattice.widths()[0];
        let mut prev = 0.0;
        for (i, m) in dense.iter_mut().enumerate() {
            let right = if i + 1 == n {
                1.0
            } else {
                normal.cdf(lattice.node(i)[0] + 0.5 * h)
            };
            *m = (right - prev).max(0.0);
            prev = right;
        }
    }
    lattice.measure_from_dense(&dense)
}

/// The LQ game with `λ` discretized onto `lattice`.
pub fn lq_model(spec: &LqSpec, lattice: &StateLattice, controls: ControlSpace) -> Result<MfgModel> {
    if controls.dimension() != 1 {
        return Err(MfgError::DimensionMismatch {
            expected: 1,
            found: controls.dimension(),
        });
    }
    MfgModel::new(
        spec.horizon,
        discretized_gaussian(lattice, spec.mean0, spec.var0)?,
        lq_constants(spec),
        controls,
        Arc::new(LqCoefficients::new(spec.coupling, spec.sigma)),
    )
}

/// Finite-difference solution of `−∂ₜV = (∂ₓV)²/4 + ½σ²∂ₓₓV`,
/// `V(T, x) = −(x + c·mean_T)²`, by explicit Euler backward in time with
/// central differences and quadratic extrapolation at the edges.
#[derive(Debug, Clone)]
pub struct FdHjb {
    lower: f64,
    dx: f64,
    dt: f64,
    /// `∂ₓV / 2` per time level `0..=nt`, per grid point.
    feedback: Vec<Vec<f64>>,
}

impl FdHjb {
    pub fn solve(spec: &LqSpec, mean_t: f64, lower: f64, upper: f64, nx: usize, nt: usize) -> Result<Self> {
        if nx < 4 || nt == 0 || !(upper > lower) {
            return Err(MfgError::InvalidArgument("degenerate finite-difference grid".into()));
        }
        let dx = (upper - lower) / (nx - 1) as f64;
        let dt = spec.horizon / nt as f64;
        let shift = spec.coupling * mean_t;
        let mut v: Vec<f64> = (0..nx)
            .map(|i| {
                let y = lower + i as f64 * dx + shift;
                -y * y
            })
            .collect();
        let half_var = 0.5 * spec.sigma * spec.sigma;
        let mut feedback = vec![Vec::new(); nt + 1];
        let mut padded = vec![0.0; nx + 2];
        for level in (0..=nt).rev() {
            padded[1..=nx].copy_from_slice(&v);
            padded[0] = 3.0 * v[0] - 3.0 * v[1] + v[2];
            padded[nx + 1] = 3.0 * v[nx - 1] - 3.0 * v[nx - 2] + v[nx - 3];
            let grad: Vec<f64> = (1..=nx)
                .map(|i| (padded[i + 1] - padded[i - 1]) / (2.0 * dx))
                .collect();
            feedback[level] = grad.iter().map(|g| 0.5 * g).collect();
            if level == 0 {
                break;
            }
            for i in 0..nx {
                let lap = (padded[i + 2] - 2.0 * padded[i + 1] + padded[i]) / (dx * dx);
                v[i] += dt * (0.25 * grad[i] * grad[i] + half_var * lap);
            }
        }
        Ok(Self {
            lower,
            dx,
            dt,
            feedback,
        })
    }

    /// Feedback at the time level nearest `t`, linearly interpolated in `x`.
    pub fn feedback(&self, t: f64, x: f64) -> f64 {
        let level = ((t / self.dt).round() as usize).min(self.feedback.len() - 1);
        let row = &self.feedback[level];
        let u = ((x - self.lower) / self.dx).clamp(0.0, (row.len() - 1) as f64);
        let i = (u.floor() as usize).min(row.len() - 2);
        let w = u - i as f64;
        (1.0 - w) * row[i] + w * row[i + 1]
    }
}
