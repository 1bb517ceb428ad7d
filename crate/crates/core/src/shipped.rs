//! A small set of ready-made games used by the command-line tool, the
//! duality checks and the convexity checks. Every instance is small enough
//! for the dense simplex and comes with a constant-`λ` reference flow.

use std::sync::Arc;

use crate::error::Result;
use crate::fixedpoint::Discretization;
use crate::kernel::{CflPolicy, StateLattice, TimeGrid};
use crate::lq::{discretized_gaussian, lq_model, LqSpec};
use crate::measures::{DiscreteMeasure, MeasureFlow};
use crate::model::{ControlSpace, FnCoefficients, GrowthConstants, MfgModel};

#[derive(Debug, Clone)]
pub struct ShippedExample {
    pub name: &'static str,
    pub model: MfgModel,
    pub disc: Discretization,
    /// The initial law held constant in time.
    pub flow: MeasureFlow,
}

pub const NAMES: [&str; 5] = ["lq-small", "uncoupled", "congestion", "controlled-volatility", "planar"];

fn finish(name: &'static str, model: MfgModel, lattice: StateLattice, grid: TimeGrid) -> Result<ShippedExample> {
    let flow = MeasureFlow::constant(grid.times(), model.initial_law())?;
    Ok(ShippedExample {
        name,
        model,
        disc: Discretization {
            lattice,
            grid,
            cfl: CflPolicy::Error,
        },
        flow,
    })
}

fn scalar_constants() -> Result<GrowthConstants> {
    GrowthConstants::new(1.0, 2.0, 1.0, 2.0, 2.0, 0.0)
}

/// Builds one shipped example by name.
pub fn example(name: &str) -> Option<Result<ShippedExample>> {
    let built = match name {
        "lq-small" => (|| {
            let lattice = StateLattice::uniform(-1.0, 2.0, 0.25)?;
            let spec = LqSpec::new(1.0, 1.0, 0.3, 1.0, 0.04)?;
            let model = lq_model(&spec, &lattice, ControlSpace::uniform(-1.0, 1.0, 5, true)?)?;
            finish("lq-small", model, lattice, TimeGrid::new(1.0, 6)?)
        })(),
        "uncoupled" => (|| {
            let lattice = StateLattice::uniform(-1.0, 1.0, 0.25)?;
            let model = MfgModel::new(
                1.0,
                discretized_gaussian(&lattice, 0.25, 0.05)?,
                scalar_constants()?,
                ControlSpace::uniform(-1.0, 1.0, 5, true)?,
                Arc::new(
                    FnCoefficients::scalar(
                        |_, _, _, a| a,
                        |_, _, _, _| 0.3,
                        |_, x, _, a| -a * a - x * x,
                        |x, _| -x * x,
                    )
                    .with_population_free_dynamics(),
                ),
            )?;
            finish("uncoupled", model, lattice, TimeGrid::new(1.0, 6)?)
        })(),
        "congestion" => (|| {
            let lattice = StateLattice::uniform(-1.0, 1.0, 0.25)?;
            let model = MfgModel::new(
                1.0,
                DiscreteMeasure::from_scalars(&[-0.5, 0.0, 0.5], &[0.25, 0.5, 0.25])?,
                scalar_constants()?,
                ControlSpace::uniform(-1.0, 1.0, 5, true)?,
                Arc::new(FnCoefficients::scalar(
                    |_, _, mu, a| a - 0.5 * mu.mean()[0],
                    |_, _, _, _| 0.3,
                    |_, x, mu, a| -a * a - (x - mu.mean()[0]).powi(2),
                    |x, _| -(x - 0.5).powi(2),
                )),
            )?;
            finish("congestion", model, lattice, TimeGrid::new(1.0, 8)?)
        })(),
        "controlled-volatility" => (|| {
            let lattice = StateLattice::uniform(-1.0, 1.0, 0.25)?;
            let model = MfgModel::new(
                1.0,
                DiscreteMeasure::dirac(&[0.0]),
                GrowthConstants::new(1.0, 2.0, 1.0, 2.0, 2.0, 1.0)?,
                ControlSpace::uniform(-1.0, 1.0, 5, false)?,
                Arc::new(
                    FnCoefficients::scalar(
                        |_, _, _, a| a,
                        |_, _, _, a| 0.2 + 0.3 * a.abs(),
                        |_, _, _, a| -0.5 * a * a,
                        |x, _| x - x * x,
                    )
                    .with_population_free_dynamics(),
                ),
            )?;
            finish("controlled-volatility", model, lattice, TimeGrid::new(1.0, 10)?)
        })(),
        "planar" => (|| {
            let lattice = StateLattice::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![0.5, 0.5])?;
            let mut atoms = Vec::new();
            for a0 in [-1.0, 0.0, 1.0] {
                for a1 in [-1.0, 0.0, 1.0] {
                    atoms.push(vec![a0, a1]);
                }
            }
            let model = MfgModel::new(
                1.0,
                DiscreteMeasure::new(vec![vec![0.0, 0.0], vec![0.5, -0.5]], vec![0.5, 0.5])?,
                scalar_constants()?,
                ControlSpace::new(atoms, 2f64.sqrt(), true)?,
                Arc::new(FnCoefficients::new(
                    2,
                    2,
                    |_, _, _, a, out| out.copy_from_slice(a),
                    |_, _, _, _, out| {
                        out.copy_from_slice(&[0.3, 0.0, 0.0, 0.3]);
                    },
                    |_, x, mu, a| {
                        let m = mu.mean();
                        -(a[0] * a[0] + a[1] * a[1]) - (x[0] - m[0]).powi(2) - (x[1] - m[1]).powi(2)
                    },
                    |x, _| -(x[0] - 0.5).powi(2) - x[1] * x[1],
                )),
            )?;
            finish("planar", model, lattice, TimeGrid::new(1.0, 3)?)
        })(),
        _ => return None,
    };
    Some(built)
}

/// All shipped examples.
pub fn all() -> Result<Vec<ShippedExample>> {
    NAMES.iter().map(|n| example(n).expect("listed name")).collect()
}
