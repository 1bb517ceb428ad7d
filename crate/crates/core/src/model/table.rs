//! One-dimensional coefficients tabulated on the `(time step, node, atom)` grid.
//!
//! A tabulated value is looked up at the nearest node and atom and the time
//! step containing `t`; population dependence enters additively through a
//! weighted sum of declared functionals of the current marginal.

use super::{Coefficients, ControlSpace, Population};
use crate::error::{MfgError, Result};
use crate::kernel::{StateLattice, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopulationFunctional {
    /// `∫ y μ(dy)`.
    Mean,
    /// `∫ y² μ(dy)`.
    SecondMoment,
    /// `μ((−∞, x])` at the evaluation point `x`.
    CdfAtX,
}

impl PopulationFunctional {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mean" => Ok(Self::Mean),
            "second-moment" => Ok(Self::SecondMoment),
            "cdf-at-x" => Ok(Self::CdfAtX),
            other => Err(MfgError::InvalidArgument(format!(
                "unknown population functional '{other}' (expected mean, second-moment or cdf-at-x)"
            ))),
        }
    }

    fn eval(self, x: f64, mu: &Population<'_>) -> f64 {
        match self {
            Self::Mean => mu.mean()[0],
            Self::SecondMoment => mu.second_moment(),
            Self::CdfAtX => mu.cdf(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunctionalTerm {
    pub functional: PopulationFunctional,
    pub weight: f64,
}

/// Values laid out as `layers × nodes × atoms`; a single layer is time-independent.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedField {
    layers: usize,
    values: Vec<f64>,
    terms: Vec<FunctionalTerm>,
}

impl TabulatedField {
    pub fn new(layers: usize, values: Vec<f64>, terms: Vec<FunctionalTerm>) -> Self {
        Self {
            layers,
            values,
            terms,
        }
    }

    /// The same value everywhere.
    pub fn constant(value: f64) -> Self {
        Self::new(0, vec![value], Vec::new())
    }

    fn check(&self, what: &str, steps: usize, nodes: usize, atoms: usize) -> Result<()> {
        if self.layers == 0 {
            return if self.values.len() == 1 {
                Ok(())
            } else {
                Err(MfgError::InvalidArgument(format!(
                    "{what}: constant table must hold one value"
                )))
            };
        }
        if self.layers != 1 && self.layers != steps {
            return Err(MfgError::InvalidArgument(format!(
                "{what}: table has {} time layers, expected 1 or {steps}",
                self.layers
            )));
        }
        let expected = self.layers * nodes * atoms;
        if self.values.len() != expected {
            return Err(MfgError::InvalidArgument(format!(
                "{what}: table holds {} values, expected {expected}",
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(MfgError::InvalidArgument(format!("{what}: non-finite entry")));
        }
        Ok(())
    }

    fn lookup(&self, k: usize, i: usize, j: usize, nodes: usize, atoms: usize) -> f64 {
        if self.layers == 0 {
            return self.values[0];
        }
        let layer = k.min(self.layers - 1);
        self.values[(layer * nodes + i) * atoms + j]
    }

    fn population_part(&self, x: f64, mu: &Population<'_>) -> f64 {
        self.terms
            .iter()
            .map(|t| t.weight * t.functional.eval(x, mu))
            .sum()
    }
}

/// Scalar model whose `b, σ, f` live on `(time step, node, atom)` and `g` on nodes.
#[derive(Debug, Clone)]
pub struct TableCoefficients {
    lower: f64,
    h: f64,
    nodes: usize,
    dt: f64,
    steps: usize,
    atoms: Vec<f64>,
    drift: TabulatedField,
    volatility: TabulatedField,
    running: TabulatedField,
    terminal: TabulatedField,
}

impl TableCoefficients {
    /// `terminal` is laid out as `1 × nodes × 1` (or a constant).
    pub fn new(
        lattice: &StateLattice,
        grid: &TimeGrid,
        controls: &ControlSpace,
        drift: TabulatedField,
        volatility: TabulatedField,
        running: TabulatedField,
        terminal: TabulatedField,
    ) -> Result<Self> {
        if lattice.dimension() != 1 || controls.dimension() != 1 {
            return Err(MfgError::UnsupportedModel(
                "tabulated coefficients need a scalar state and control".into(),
            ));
        }
        let (steps, nodes, atoms) = (grid.steps(), lattice.len(), controls.len());
        drift.check("drift", steps, nodes, atoms)?;
        volatility.check("volatility", steps, nodes, atoms)?;
        running.check("running reward", steps, nodes, atoms)?;
        if terminal.layers > 1 {
            return Err(MfgError::InvalidArgument(
                "terminal reward: table must have a single layer".into(),
            ));
        }
        terminal.check("terminal reward", 1, nodes, 1)?;
        Ok(Self {
            lower: lattice.lower(0),
            h: lattice.widths()[0],
            nodes,
            dt: grid.dt(),
            steps,
            atoms: controls.atoms().map(|a| a[0]).collect(),
            drift,
            volatility,
            running,
            terminal,
        })
    }

    fn node(&self, x: f64) -> usize {
        let k = ((x - self.lower) / self.h).round();
        k.clamp(0.0, (self.nodes - 1) as f64) as usize
    }

    fn step(&self, t: f64) -> usize {
        ((t / self.dt + 1e-9).floor().max(0.0) as usize).min(self.steps - 1)
    }

    fn atom(&self, a: f64) -> usize {
        let mut best = 0;
        for (j, &b) in self.atoms.iter().enumerate() {
            if (b - a).abs() < (self.atoms[best] - a).abs() {
                best = j;
            }
        }
        best
    }

    fn eval(&self, field: &TabulatedField, t: f64, x: f64, mu: &Population<'_>, a: f64) -> f64 {
        let value = field.lookup(
            self.step(t),
            self.node(x),
            self.atom(a),
            self.nodes,
            self.atoms.len(),
        );
        value + field.population_part(x, mu)
    }
}

impl Coefficients for TableCoefficients {
    fn state_dimension(&self) -> usize {
        1
    }
    fn noise_dimension(&self) -> usize {
        1
    }
    fn drift(&self, t: f64, x: &[f64], mu: &Population<'_>, a: &[f64], out: &mut [f64]) {
        out[0] = self.eval(&self.drift, t, x[0], mu, a[0]);
    }
    fn volatility(&self, t: f64, x: &[f64], mu: &Population<'_>, a: &[f64], out: &mut [f64]) {
        out[0] = self.eval(&self.volatility, t, x[0], mu, a[0]);
    }
    fn running_reward(&self, t: f64, x: &[f64], mu: &Population<'_>, a: &[f64]) -> f64 {
        self.eval(&self.running, t, x[0], mu, a[0])
    }
    fn terminal_reward(&self, x: &[f64], mu: &Population<'_>) -> f64 {
        let value = self.terminal.lookup(0, self.node(x[0]), 0, self.nodes, 1);
        value + self.terminal.population_part(x[0], mu)
    }
    fn dynamics_depend_on_population(&self) -> bool {
        !self.drift.terms.is_empty() || !self.volatility.terms.is_empty()
    }
    fn running_reward_depends_on_population(&self) -> bool {
        !self.running.terms.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::DiscreteMeasure;

    fn setup() -> (StateLattice, TimeGrid, ControlSpace) {
        (
            StateLattice::uniform(0.0, 1.0, 0.5).unwrap(),
            TimeGrid::new(1.0, 2).unwrap(),
            ControlSpace::uniform(-1.0, 1.0, 2, false).unwrap(),
        )
    }

    #[test]
    fn lookup_uses_nearest_node_atom_and_step() {
        let (lattice, grid, controls) = setup();
        // two layers × three nodes × two atoms
        let drift: Vec<f64> = (0..12).map(f64::from).collect();
        let coeffs = TableCoefficients::new(
            &lattice,
            &grid,
            &controls,
            TabulatedField::new(2, drift, vec![]),
            TabulatedField::constant(0.3),
            TabulatedField::constant(0.0),
            TabulatedField::new(1, vec![1.0, 2.0, 3.0], vec![]),
        )
        .unwrap();
        let mu = DiscreteMeasure::dirac(&[0.5]);
        let pop = Population::new(&mu);
        let mut out = [0.0];
        coeffs.drift(0.0, &[0.0], &pop, &[-1.0], &mut out);
        assert_eq!(out[0], 0.0);
        coeffs.drift(0.5, &[0.6], &pop, &[1.0], &mut out);
        assert_eq!(out[0], 6.0 + 2.0 + 1.0);
        coeffs.drift(1.0, &[1.0], &pop, &[0.9], &mut out);
        assert_eq!(out[0], 11.0);
        assert_eq!(coeffs.terminal_reward(&[0.9], &pop), 3.0);
        assert!(!coeffs.dynamics_depend_on_population());
    }

    #[test]
    fn functionals_are_added() {
        let (lattice, grid, controls) = setup();
        let terms = vec![
            FunctionalTerm {
                functional: PopulationFunctional::Mean,
                weight: 2.0,
            },
            FunctionalTerm {
                functional: PopulationFunctional::CdfAtX,
                weight: -1.0,
            },
        ];
        let coeffs = TableCoefficients::new(
            &lattice,
            &grid,
            &controls,
            TabulatedField::new(0, vec![0.0], terms.clone()),
            TabulatedField::constant(0.3),
            TabulatedField::new(0, vec![1.0], terms),
            TabulatedField::constant(0.0),
        )
        .unwrap();
        let mu = DiscreteMeasure::from_scalars(&[0.0, 1.0], &[0.25, 0.75]).unwrap();
        let pop = Population::new(&mu);
        assert_eq!(coeffs.running_reward(0.0, &[0.5], &pop, &[1.0]), 1.0 + 1.5 - 0.25);
        assert!(coeffs.dynamics_depend_on_population());
    }

    #[test]
    fn shape_errors_are_reported() {
        let (lattice, grid, controls) = setup();
        let err = TableCoefficients::new(
            &lattice,
            &grid,
            &controls,
            TabulatedField::new(1, vec![0.0; 5], vec![]),
            TabulatedField::constant(0.3),
            TabulatedField::constant(0.0),
            TabulatedField::constant(0.0),
        );
        assert!(err.is_err());
        assert!(PopulationFunctional::parse("median").is_err());
    }
}
