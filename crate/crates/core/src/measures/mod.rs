//! Atomic probability measures on ℝ^d and time-indexed flows of them.
//!
//! Measures here are finite sums of weighted Dirac masses. Everything the
//! solver touches (initial laws, population marginals, mollified laws) lives
//! in this representation, usually supported on the nodes of a
//! [`StateLattice`](crate::kernel::StateLattice).

mod io;
mod mollify;
mod transport;

pub use io::{
    dump_flow, dump_measure, format_float, load_flow, load_measure, load_measure_rows, MeasureRow,
};
pub use mollify::{mollifier_moment, mollify};
pub use transport::{transport_plan, TransportPlan};

use crate::error::{MfgError, Result};

/// Allowed drift of the total mass away from one.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// A probability measure with finitely many atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dimension: usize,
    /// Flattened atom coordinates, `len() * dimension` entries.
    points: Vec<f64>,
    masses: Vec<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure from per-atom points. Points must be pairwise distinct.
    pub fn new(points: Vec<Vec<f64>>, masses: Vec<f64>) -> Result<Self> {
        let dimension = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| MfgError::InvalidMeasure("no atoms".into()))?;
        let mut flat = Vec::with_capacity(points.len() * dimension);
        for p in &points {
            if p.len() != dimension {
                return Err(MfgError::DimensionMismatch {
                    expected: dimension,
                    found: p.len(),
                });
            }
            flat.extend_from_slice(p);
        }
        Self::from_flat(dimension, flat, masses)
    }

    /// Builds a one-dimensional measure from scalar atoms.
    pub fn from_scalars(points: &[f64], masses: &[f64]) -> Result<Self> {
        Self::from_flat(1, points.to_vec(), masses.to_vec())
    }

    pub fn from_flat(dimension: usize, points: Vec<f64>, mut masses: Vec<f64>) -> Result<Self> {
        if dimension == 0 {
            return Err(MfgError::InvalidMeasure("dimension must be positive".into()));
        }
        if masses.is_empty() {
            return Err(MfgError::InvalidMeasure("no atoms".into()));
        }
        if points.len() != masses.len() * dimension {
            return Err(MfgError::InvalidMeasure(format!(
                "{} coordinates for {} atoms of dimension {}",
                points.len(),
                masses.len(),
                dimension
            )));
        }
        if let Some(x) = points.iter().find(|x| !x.is_finite()) {
            return Err(MfgError::InvalidMeasure(format!("non-finite coordinate {x}")));
        }
        if let Some(m) = masses.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
            return Err(MfgError::InvalidMeasure(format!("invalid mass {m}")));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(MfgError::InvalidMeasure(format!(
                "total mass {total} differs from 1"
            )));
        }
        // Skip renormalizing totals that are 1 up to rounding, so that
        // dump/load round trips are exact.
        if (total - 1.0).abs() > 4.0 * f64::EPSILON * masses.len() as f64 {
            masses.iter_mut().for_each(|m| *m /= total);
        }
        let measure = Self {
            dimension,
            points,
            masses,
        };
        if let Some(i) = measure.first_duplicate() {
            return Err(MfgError::InvalidMeasure(format!(
                "duplicate atom at {:?}",
                measure.point(i)
            )));
        }
        Ok(measure)
    }

    /// Like [`from_flat`](Self::from_flat) but sums the masses of repeated points.
    pub fn merged(dimension: usize, points: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if dimension == 0 || points.len() != masses.len() * dimension {
            return Err(MfgError::InvalidMeasure("inconsistent atom arrays".into()));
        }
        let mut index: std::collections::HashMap<Vec<u64>, usize> = Default::default();
        let mut out_points = Vec::with_capacity(points.len());
        let mut out_masses: Vec<f64> = Vec::with_capacity(masses.len());
        for (p, &m) in points.chunks(dimension).zip(&masses) {
            let key: Vec<u64> = p.iter().map(|x| (x + 0.0).to_bits()).collect();
            match index.get(&key) {
                Some(&i) => out_masses[i] += m,
                None => {
                    index.insert(key, out_masses.len());
                    out_points.extend_from_slice(p);
                    out_masses.push(m);
                }
            }
        }
        Self::from_flat(dimension, out_points, out_masses)
    }

    pub fn dirac(point: &[f64]) -> Self {
        Self {
            dimension: point.len(),
            points: point.to_vec(),
            masses: vec![1.0],
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn mass(&self, i: usize) -> f64 {
        self.masses[i]
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn flat_points(&self) -> &[f64] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points
            .chunks(self.dimension)
            .zip(self.masses.iter().copied())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dimension];
        for (p, m) in self.iter() {
            for (acc, x) in mean.iter_mut().zip(p) {
                *acc += m * x;
            }
        }
        mean
    }

    fn first_duplicate(&self) -> Option<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| lex_cmp(self.point(a), self.point(b)));
        order
            .windows(2)
            .find(|w| self.point(w[0]) == self.point(w[1]))
            .map(|w| w[1])
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A flow of marginals `t ↦ μ_t` sampled on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    times: Vec<f64>,
    marginals: Vec<DiscreteMeasure>,
}

impl MeasureFlow {
    pub fn new(times: Vec<f64>, marginals: Vec<DiscreteMeasure>) -> Result<Self> {
        if times.is_empty() || times.len() != marginals.len() {
            return Err(MfgError::InvalidArgument(format!(
                "{} times for {} marginals",
                times.len(),
                marginals.len()
            )));
        }
        if times[0] != 0.0 {
            return Err(MfgError::InvalidArgument("flow must start at t = 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(MfgError::InvalidArgument(
                "flow times must be strictly increasing".into(),
            ));
        }
        let d = marginals[0].dimension();
        if let Some(m) = marginals.iter().find(|m| m.dimension() != d) {
            return Err(MfgError::DimensionMismatch {
                expected: d,
                found: m.dimension(),
            });
        }
        Ok(Self { times, marginals })
    }

    /// The same measure at every time.
    pub fn constant(times: Vec<f64>, mu: &DiscreteMeasure) -> Result<Self> {
        let marginals = vec![mu.clone(); times.len()];
        Self::new(times, marginals)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn marginals(&self) -> &[DiscreteMeasure] {
        &self.marginals
    }

    pub fn marginal(&self, k: usize) -> &DiscreteMeasure {
        &self.marginals[k]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty flow")
    }

    pub fn dimension(&self) -> usize {
        self.marginals[0].dimension()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal(&self) -> &DiscreteMeasure {
        self.marginals.last().expect("non-empty flow")
    }
}

/// `Σ_i m_i |x_i|^p`.
pub fn moment(mu: &DiscreteMeasure, p: f64) -> f64 {
    mu.iter().map(|(x, m)| m * norm(x).powf(p)).sum()
}

fn check_order(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(MfgError::InvalidArgument(format!(
            "Wasserstein order must be a finite p >= 1, got {p}"
        )));
    }
    Ok(())
}

/// Wasserstein-p distance from the optimal transport linear program between
/// the two atom sets.
pub fn wasserstein(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: f64) -> Result<f64> {
    check_order(p)?;
    if mu.dimension() != nu.dimension() {
        return Err(MfgError::DimensionMismatch {
            expected: mu.dimension(),
            found: nu.dimension(),
        });
    }
    let plan = transport_plan(mu, nu, |x, y| euclid(x, y).powf(p));
    Ok(plan.cost.max(0.0).powf(1.0 / p))
}

/// Wasserstein-p distance of one-dimensional measures through the quantile
/// coupling `∫₀¹ |F⁻¹(u) − G⁻¹(u)|^p du`.
pub fn wasserstein_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: f64) -> Result<f64> {
    check_order(p)?;
    for m in [mu, nu] {
        if m.dimension() != 1 {
            return Err(MfgError::DimensionMismatch {
                expected: 1,
                found: m.dimension(),
            });
        }
    }
    let sorted = |m: &DiscreteMeasure| {
        let mut atoms: Vec<(f64, f64)> = m
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(x, w)| (x[0], w))
            .collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        atoms
    };
    Ok(quantile_cost(&sorted(mu), &sorted(nu), p).powf(1.0 / p))
}

/// Cost of the monotone coupling of two sorted atom lists.
pub(crate) fn quantile_cost(a: &[(f64, f64)], b: &[(f64, f64)], p: f64) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = match (a.first(), b.first()) {
        (Some(x), Some(y)) => (x.1, y.1),
        _ => return 0.0,
    };
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        let w = ra.min(rb);
        cost += w * (a[i].0 - b[j].0).abs().powf(p);
        if ra <= rb {
            rb -= ra;
            i += 1;
            if let Some(x) = a.get(i) {
                ra = x.1;
            }
        } else {
            ra -= rb;
            j += 1;
            if let Some(y) = b.get(j) {
                rb = y.1;
            }
        }
    }
    cost.max(0.0)
}

/// `max_t W_p(f1_t, f2_t)` over a shared time grid.
pub fn flow_distance(f1: &MeasureFlow, f2: &MeasureFlow, p: f64) -> Result<f64> {
    if f1.times() != f2.times() {
        return Err(MfgError::TimeGridMismatch(format!(
            "{} vs {} time points",
            f1.len(),
            f2.len()
        )));
    }
    let one_d = f1.dimension() == 1 && f2.dimension() == 1;
    let mut worst: f64 = 0.0;
    for (a, b) in f1.marginals().iter().zip(f2.marginals()) {
        let d = if one_d {
            wasserstein_1d(a, b, p)?
        } else {
            wasserstein(a, b, p)?
        };
        worst = worst.max(d);
    }
    Ok(worst)
}

/// The convex combination `(1 − ω) μ + ω ν`, merging shared atoms.
pub fn mix(mu: &DiscreteMeasure, nu: &DiscreteMeasure, omega: f64) -> Result<DiscreteMeasure> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(MfgError::InvalidArgument(format!(
            "mixing weight {omega} outside [0, 1]"
        )));
    }
    if mu.dimension() != nu.dimension() {
        return Err(MfgError::DimensionMismatch {
            expected: mu.dimension(),
            found: nu.dimension(),
        });
    }
    let d = mu.dimension();
    let mut points = Vec::with_capacity(mu.points.len() + nu.points.len());
    let mut masses = Vec::with_capacity(mu.len() + nu.len());
    for (measure, weight) in [(mu, 1.0 - omega), (nu, omega)] {
        if weight == 0.0 {
            continue;
        }
        points.extend_from_slice(&measure.points);
        masses.extend(measure.masses.iter().map(|m| m * weight));
    }
    DiscreteMeasure::merged(d, points, masses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(points: &[f64], masses: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::from_scalars(points, masses).unwrap()
    }

    #[test]
    fn construction_rejects_bad_masses() {
        assert!(DiscreteMeasure::from_scalars(&[0.0, 1.0], &[0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::from_scalars(&[0.0, 1.0], &[1.5, -0.5]).is_err());
        assert!(DiscreteMeasure::from_scalars(&[0.0, 0.0], &[0.5, 0.5]).is_err());
        let m = DiscreteMeasure::from_scalars(&[0.0, 1.0], &[0.5, 0.5 + 5e-13]).unwrap();
        assert_eq!(m.masses().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn moment_examples() {
        assert_eq!(moment(&DiscreteMeasure::dirac(&[2.0]), 2.0), 4.0);
        assert_eq!(moment(&scalars(&[0.0, 2.0], &[0.5, 0.5]), 1.0), 1.0);
        let third = 1.0 / 3.0;
        let u = scalars(&[-1.0, 0.0, 1.0], &[third, third, third]);
        // direct sum: (1 + 0 + 1) / 3
        assert!((moment(&u, 3.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_examples() {
        let d0 = DiscreteMeasure::dirac(&[0.0]);
        let d1 = DiscreteMeasure::dirac(&[1.0]);
        let half = scalars(&[0.0, 2.0], &[0.5, 0.5]);
        assert_eq!(wasserstein(&d0, &d1, 1.0).unwrap(), 1.0);
        assert!((wasserstein(&half, &d1, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(wasserstein(&half, &half, 2.0).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&d0, &d1, 2.0).unwrap(), 1.0);
        assert!((wasserstein_1d(&half, &d1, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let skew = scalars(&[0.0, 4.0], &[0.25, 0.75]);
        assert!((wasserstein_1d(&skew, &d0, 1.0).unwrap() - 3.0).abs() < 1e-15);
        assert!((wasserstein(&skew, &d0, 1.0).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_errors() {
        let d0 = DiscreteMeasure::dirac(&[0.0]);
        let planar = DiscreteMeasure::dirac(&[0.0, 0.0]);
        assert!(matches!(
            wasserstein(&d0, &planar, 1.0),
            Err(MfgError::DimensionMismatch { .. })
        ));
        assert!(wasserstein(&d0, &d0, 0.5).is_err());
        assert!(wasserstein_1d(&planar, &planar, 1.0).is_err());
    }

    fn flow(times: &[f64], marginals: Vec<DiscreteMeasure>) -> MeasureFlow {
        MeasureFlow::new(times.to_vec(), marginals).unwrap()
    }

    #[test]
    fn flow_distance_examples() {
        let d0 = DiscreteMeasure::dirac(&[0.0]);
        let d1 = DiscreteMeasure::dirac(&[1.0]);
        let f = flow(&[0.0, 1.0], vec![d0.clone(), d0.clone()]);
        assert_eq!(flow_distance(&f, &f, 1.0).unwrap(), 0.0);
        let g = flow(&[0.0, 1.0], vec![d0.clone(), d1.clone()]);
        assert_eq!(flow_distance(&f, &g, 1.0).unwrap(), 1.0);

        let a = flow(&[0.0, 1.0], vec![d0.clone(), d0.clone()]);
        let b = flow(
            &[0.0, 1.0],
            vec![DiscreteMeasure::dirac(&[0.5]), DiscreteMeasure::dirac(&[0.2])],
        );
        assert!((flow_distance(&a, &b, 1.0).unwrap() - 0.5).abs() < 1e-15);

        let h = flow(&[0.0, 0.5], vec![d0.clone(), d0]);
        assert!(matches!(
            flow_distance(&f, &h, 1.0),
            Err(MfgError::TimeGridMismatch(_))
        ));
    }

    #[test]
    fn flow_invariants() {
        let d0 = DiscreteMeasure::dirac(&[0.0]);
        assert!(MeasureFlow::new(vec![0.1, 1.0], vec![d0.clone(), d0.clone()]).is_err());
        assert!(MeasureFlow::new(vec![0.0, 0.0], vec![d0.clone(), d0.clone()]).is_err());
        assert!(MeasureFlow::new(vec![0.0], vec![d0.clone(), d0]).is_err());
    }

    #[test]
    fn mix_examples() {
        let d0 = DiscreteMeasure::dirac(&[0.0]);
        let d1 = DiscreteMeasure::dirac(&[1.0]);
        let half = scalars(&[0.0, 1.0], &[0.5, 0.5]);
        assert_eq!(mix(&half, &d1, 0.0).unwrap(), half);
        assert_eq!(mix(&d0, &d1, 0.5).unwrap(), half);
        assert_eq!(
            mix(&half, &d1, 0.5).unwrap(),
            scalars(&[0.0, 1.0], &[0.25, 0.75])
        );
        assert!(mix(&d0, &d1, 1.5).is_err());
        assert!(mix(&d0, &d1, -0.1).is_err());
    }
}
