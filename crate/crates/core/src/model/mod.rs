//! Problem data: coefficient evaluators `(b, σ, f, g)`, growth constants, the
//! finite control set, and sampling validators for the growth and convexity
//! conditions the existence theory relies on.

mod table;
mod validate;

pub use table::{FunctionalTerm, PopulationFunctional, TableCoefficients, TabulatedField};
pub use validate::{
    check_combination, check_convexity, validate_growth, CombinationCheck, ConvexityOptions,
    ConvexityReport, ConvexityTolerance, ConvexityVerdict, GrowthSample, InequalityCheck,
    ValidationReport,
};

use std::fmt;
use std::sync::{Arc, OnceLock};

use crate::error::{MfgError, Result};
use crate::measures::{moment, norm, DiscreteMeasure};

/// Constants `c₁, c₂, c₃` and exponents `p, p′, p_σ` of the growth conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub p: f64,
    pub p_prime: f64,
    pub p_sigma: f64,
}

impl GrowthConstants {
    pub fn new(c1: f64, c2: f64, c3: f64, p: f64, p_prime: f64, p_sigma: f64) -> Result<Self> {
        let positive = [("c1", c1), ("c2", c2), ("c3", c3), ("p'", p_prime)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(MfgError::InvalidArgument(format!("{name} must be positive, got {v}")));
        }
        if !(p >= 1.0 && p.is_finite()) {
            return Err(MfgError::InvalidArgument(format!("p must be >= 1, got {p}")));
        }
        if !(0.0..=2.0).contains(&p_sigma) {
            return Err(MfgError::InvalidArgument(format!(
                "p_sigma must lie in [0, 2], got {p_sigma}"
            )));
        }
        if p < p_sigma {
            return Err(MfgError::InvalidArgument(format!(
                "p = {p} must be at least p_sigma = {p_sigma}"
            )));
        }
        Ok(Self {
            c1,
            c2,
            c3,
            p,
            p_prime,
            p_sigma,
        })
    }

    /// Whether the strict coercivity gap `p′ > p` holds. It may deliberately fail.
    pub fn p_prime_exceeds_p(&self) -> bool {
        self.p_prime > self.p
    }
}

/// The finite control set standing in for `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpace {
    dimension: usize,
    atoms: Vec<f64>,
    bound: f64,
    convex_hint: bool,
}

impl ControlSpace {
    pub fn new(atoms: Vec<Vec<f64>>, bound: f64, convex_hint: bool) -> Result<Self> {
        let dimension = atoms
            .first()
            .map(Vec::len)
            .filter(|&d| d > 0)
            .ok_or_else(|| MfgError::InvalidArgument("control set is empty".into()))?;
        if atoms.iter().any(|a| a.len() != dimension) {
            return Err(MfgError::InvalidArgument(
                "control atoms have mixed dimensions".into(),
            ));
        }
        let flat: Vec<f64> = atoms.concat();
        Self::from_flat(dimension, flat, bound, convex_hint)
    }

    pub fn from_flat(dimension: usize, atoms: Vec<f64>, bound: f64, convex_hint: bool) -> Result<Self> {
        if dimension == 0 || atoms.is_empty() || !atoms.len().is_multiple_of(dimension) {
            return Err(MfgError::InvalidArgument("control set is empty".into()));
        }
        let space = Self {
            dimension,
            atoms,
            bound,
            convex_hint,
        };
        for j in 0..space.len() {
            let a = space.atom(j);
            if a.iter().any(|x| !x.is_finite()) {
                return Err(MfgError::InvalidArgument(format!("non-finite control {a:?}")));
            }
            if norm(a) > bound * (1.0 + 1e-12) {
                return Err(MfgError::InvalidArgument(format!(
                    "control {a:?} lies outside the bound {bound}"
                )));
            }
            if (0..j).any(|k| space.atom(k) == a) {
                return Err(MfgError::InvalidArgument(format!("duplicate control {a:?}")));
            }
        }
        Ok(space)
    }

    /// `count` evenly spaced scalar controls on `[lower, upper]`.
    pub fn uniform(lower: f64, upper: f64, count: usize, convex_hint: bool) -> Result<Self> {
        if count == 0 || !(upper >= lower) {
            return Err(MfgError::InvalidArgument(format!(
                "bad control grid [{lower}, {upper}] with {count} atoms"
            )));
        }
        let atoms: Vec<f64> = if count == 1 {
            vec![lower]
        } else {
            (0..count)
                .map(|j| lower + (upper - lower) * j as f64 / (count - 1) as f64)
                .collect()
        };
        Self::from_flat(1, atoms, lower.abs().max(upper.abs()), convex_hint)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dimension
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j * self.dimension..(j + 1) * self.dimension]
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.atoms.chunks(self.dimension)
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn convex_hint(&self) -> bool {
        self.convex_hint
    }

    /// Largest distance from an atom to its nearest neighbour; zero for a single atom.
    pub fn spacing(&self) -> f64 {
        (0..self.len())
            .map(|j| {
                (0..self.len())
                    .filter(|&k| k != j)
                    .map(|k| crate::measures::euclid(self.atom(j), self.atom(k)))
                    .fold(f64::INFINITY, f64::min)
            })
            .filter(|d| d.is_finite())
            .fold(0.0, f64::max)
    }

    pub(crate) fn filtered(&self, keep: impl Fn(&[f64]) -> bool, bound: f64) -> Option<Self> {
        let atoms: Vec<f64> = self
            .atoms()
            .filter(|a| keep(a))
            .flat_map(|a| a.iter().copied())
            .collect();
        (!atoms.is_empty()).then_some(Self {
            dimension: self.dimension,
            atoms,
            bound,
            convex_hint: self.convex_hint,
        })
    }
}

/// The population law at one instant together with the summary statistics
/// coefficient evaluators usually need.
pub struct Population<'a> {
    measure: &'a DiscreteMeasure,
    mean: Vec<f64>,
    second_moment: f64,
    cdf: OnceLock<Vec<(f64, f64)>>,
}

impl<'a> Population<'a> {
    pub fn new(measure: &'a DiscreteMeasure) -> Self {
        Self {
            measure,
            mean: measure.mean(),
            second_moment: moment(measure, 2.0),
            cdf: OnceLock::new(),
        }
    }

    pub fn measure(&self) -> &DiscreteMeasure {
        self.measure
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// `μ((−∞, x])` for a one-dimensional population.
    pub fn cdf(&self, x: f64) -> f64 {
        let table = self.cdf.get_or_init(|| {
            let mut atoms: Vec<(f64, f64)> = self.measure.iter().map(|(p, m)| (p[0], m)).collect();
            atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut acc = 0.0;
            atoms
                .into_iter()
                .map(|(p, m)| {
                    acc += m;
                    (p, acc)
                })
                .collect()
        });
        let k = table.partition_point(|&(p, _)| p <= x);
        if k == 0 {
            0.0
        } else {
            table[k - 1].1.min(1.0)
        }
    }
}

/// Coefficient evaluators of a mean field game.
///
/// `mu` enters only through the population law at the current instant.
/// Implementations must be pure: equal arguments give bitwise-equal results.
pub trait Coefficients: Send + Sync {
    fn state_dimension(&self) -> usize;

    /// Number of columns `m` of the volatility matrix.
    fn noise_dimension(&self) -> usize;

    fn drift(&self, t: f64, x: &[f64], mu: &Population<'_>, a: &[f64], out: &mut [f64]);

    /// `σ(t, x, μ, a)` as a row-major `d × m` matrix.
    fn volatility(&self, t: f64, x: &[f64], mu: &Population<'_>, a: &[f64], out: &mut [f64]);

    fn running_reward(&self, t: f64, x: &[f64], mu: &Population<'_>, a: &[f64]) -> f64;

    fn terminal_reward(&self, x: &[f64], mu: &Population<'_>) -> f64;

    /// False when `b` and `σ` ignore `mu`; lets the solver reuse transition kernels.
    fn dynamics_depend_on_population(&self) -> bool {
        true
    }

    /// False when `f` ignores `mu`; lets the solver reuse running-reward tables.
    fn running_reward_depends_on_population(&self) -> bool {
        true
    }

    /// `σσᵀ` as a row-major `d × d` matrix.
    fn diffusion(&self, t: f64, x: &[f64], mu: &Population<'_>, a: &[f64], out: &mut [f64]) {
        let d = self.state_dimension();
        let m = self.noise_dimension();
        let mut stack = [0.0; 16];
        let mut heap;
        let sigma: &mut [f64] = if d * m <= stack.len() {
            &mut stack[..d * m]
        } else {
            heap = vec![0.0; d * m];
            &mut heap
        };
        self.volatility(t, x, mu, a, sigma);
        for r in 0..d {
            for c in 0..d {
                out[r * d + c] = (0..m).map(|k| sigma[r * m + k] * sigma[c * m + k]).sum();
            }
        }
    }
}

type VecField = dyn Fn(f64, &[f64], &Population<'_>, &[f64], &mut [f64]) + Send + Sync;
type Reward = dyn Fn(f64, &[f64], &Population<'_>, &[f64]) -> f64 + Send + Sync;
type Terminal = dyn Fn(&[f64], &Population<'_>) -> f64 + Send + Sync;

/// Coefficients backed by closures.
pub struct FnCoefficients {
    state_dimension: usize,
    noise_dimension: usize,
    drift: Box<VecField>,
    volatility: Box<VecField>,
    running: Box<Reward>,
    terminal: Box<Terminal>,
    population_dynamics: bool,
}

impl FnCoefficients {
    pub fn new(
        state_dimension: usize,
        noise_dimension: usize,
        drift: impl Fn(f64, &[f64], &Population<'_>, &[f64], &mut [f64]) + Send + Sync + 'static,
        volatility: impl Fn(f64, &[f64], &Population<'_>, &[f64], &mut [f64]) + Send + Sync + 'static,
        running: impl Fn(f64, &[f64], &Population<'_>, &[f64]) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(&[f64], &Population<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            state_dimension,
            noise_dimension,
            drift: Box::new(drift),
            volatility: Box::new(volatility),
            running: Box::new(running),
            terminal: Box::new(terminal),
            population_dynamics: true,
        }
    }

    /// One-dimensional state, scalar noise and scalar control.
    pub fn scalar(
        drift: impl Fn(f64, f64, &Population<'_>, f64) -> f64 + Send + Sync + 'static,
        volatility: impl Fn(f64, f64, &Population<'_>, f64) -> f64 + Send + Sync + 'static,
        running: impl Fn(f64, f64, &Population<'_>, f64) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(f64, &Population<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            1,
            1,
            move |t, x, mu, a, out| out[0] = drift(t, x[0], mu, a[0]),
            move |t, x, mu, a, out| out[0] = volatility(t, x[0], mu, a[0]),
            move |t, x, mu, a| running(t, x[0], mu, a[0]),
            move |x, mu| terminal(x[0], mu),
        )
    }

    /// Declares that `b` and `σ` ignore the population.
    pub fn with_population_free_dynamics(mut self) -> Self {
        self.population_dynamics = false;
        self
    }
}

impl Coefficients for FnCoefficients {
    fn state_dimension(&self) -> usize {
        self.state_dimension
    }
    fn noise_dimension(&self) -> usize {
        self.noise_dimension
    }
    fn drift(&self, t: f64, x: &[f64], mu: &Population<'_>, a: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, mu, a, out)
    }
    fn volatility(&self, t: f64, x: &[f64], mu: &Population<'_>, a: &[f64], out: &mut [f64]) {
        (self.volatility)(t, x, mu, a, out)
    }
    fn running_reward(&self, t: f64, x: &[f64], mu: &Population<'_>, a: &[f64]) -> f64 {
        (self.running)(t, x, mu, a)
    }
    fn terminal_reward(&self, x: &[f64], mu: &Population<'_>) -> f64 {
        (self.terminal)(x, mu)
    }
    fn dynamics_depend_on_population(&self) -> bool {
        self.population_dynamics
    }
}

/// A mean field game instance.
#[derive(Clone)]
pub struct MfgModel {
    horizon: f64,
    initial_law: DiscreteMeasure,
    constants: GrowthConstants,
    controls: ControlSpace,
    coefficients: Arc<dyn Coefficients>,
}

impl fmt::Debug for MfgModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MfgModel")
            .field("horizon", &self.horizon)
            .field("dimension", &self.dimension())
            .field("constants", &self.constants)
            .field("controls", &self.controls.len())
            .finish()
    }
}

impl MfgModel {
    pub fn new(
        horizon: f64,
        initial_law: DiscreteMeasure,
        constants: GrowthConstants,
        controls: ControlSpace,
        coefficients: Arc<dyn Coefficients>,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(MfgError::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let d = coefficients.state_dimension();
        if initial_law.dimension() != d {
            return Err(MfgError::DimensionMismatch {
                expected: d,
                found: initial_law.dimension(),
            });
        }
        Ok(Self {
            horizon,
            initial_law,
            constants,
            controls,
            coefficients,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dimension(&self) -> usize {
        self.coefficients.state_dimension()
    }

    pub fn noise_dimension(&self) -> usize {
        self.coefficients.noise_dimension()
    }

    pub fn initial_law(&self) -> &DiscreteMeasure {
        &self.initial_law
    }

    pub fn constants(&self) -> &GrowthConstants {
        &self.constants
    }

    pub fn controls(&self) -> &ControlSpace {
        &self.controls
    }

    pub fn coefficients(&self) -> &dyn Coefficients {
        self.coefficients.as_ref()
    }

    pub fn with_controls(&self, controls: ControlSpace) -> Self {
        Self {
            controls,
            ..self.clone()
        }
    }

    pub fn drift(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension()];
        self.coefficients.drift(t, x, &Population::new(mu), a, &mut out);
        out
    }

    pub fn volatility(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension() * self.noise_dimension()];
        self.coefficients.volatility(t, x, &Population::new(mu), a, &mut out);
        out
    }

    pub fn diffusion(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64]) -> Vec<f64> {
        let d = self.dimension();
        let mut out = vec![0.0; d * d];
        self.coefficients.diffusion(t, x, &Population::new(mu), a, &mut out);
        out
    }

    pub fn running_reward(&self, t: f64, x: &[f64], mu: &DiscreteMeasure, a: &[f64]) -> f64 {
        self.coefficients.running_reward(t, x, &Population::new(mu), a)
    }

    pub fn terminal_reward(&self, x: &[f64], mu: &DiscreteMeasure) -> f64 {
        self.coefficients.terminal_reward(x, &Population::new(mu))
    }
}
