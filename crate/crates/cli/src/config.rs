//! Run configuration: a TOML file with `seed`, `[model]`, `[lattice]`,
//! `[time]`, `[solver]` and `[output]`. Every optional key has a default,
//! and the resolved configuration (defaults filled) is written next to the
//! outputs of each run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use mfg_core::lq::{lq_model, LqSpec};
use mfg_core::model::{FunctionalTerm, PopulationFunctional, TableCoefficients, TabulatedField};
use mfg_core::{
    CflPolicy, ControlSpace, Damping, DiscreteMeasure, Discretization, GrowthConstants, MfgError,
    MfgModel, SolveConfig, SolverKind, StateLattice, TimeGrid,
};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    pub lattice: LatticeSection,
    pub time: TimeSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModelSection {
    Lq(LqSection),
    CustomTable(TableSection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqSection {
    pub coupling: f64,
    pub sigma: f64,
    pub mean0: f64,
    pub var0: f64,
    pub controls: ControlsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsSection {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Declares the control set convex; enables strictification.
    #[serde(default = "default_true")]
    pub convex: bool,
}

/// Tabulated `b, σ, f` on `(time step, node, atom)` and `g` on nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSection {
    pub controls: ControlsSection,
    pub constants: ConstantsSection,
    pub initial: InitialSection,
    pub drift: FieldSection,
    pub volatility: FieldSection,
    pub running: FieldSection,
    pub terminal: FieldSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSection {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub p: f64,
    pub p_prime: f64,
    pub p_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub points: Vec<f64>,
    pub masses: Vec<f64>,
}

/// `layers = 0` means a single constant value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    #[serde(default)]
    pub layers: usize,
    pub values: Vec<f64>,
    #[serde(default)]
    pub terms: Vec<TermSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSection {
    pub functional: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub lower: f64,
    pub upper: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DampingKind {
    FictitiousPlay,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Dp,
    Lp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CflKind {
    Error,
    Restrict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_damping")]
    pub damping: DampingKind,
    /// Weight of the constant damping; ignored under fictitious play.
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_method")]
    pub method: MethodKind,
    /// Wasserstein order of the flow residual.
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_exploitability: Option<f64>,
    #[serde(default = "default_true")]
    pub strictify: bool,
    #[serde(default = "default_cfl")]
    pub cfl: CflKind,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            damping: default_damping(),
            omega: default_omega(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            method: default_method(),
            p: default_p(),
            tol_exploitability: None,
            strictify: true,
            cfl: default_cfl(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Relative paths are taken from the working directory.
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_directory(),
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_damping() -> DampingKind {
    DampingKind::FictitiousPlay
}
fn default_omega() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-4
}
fn default_max_iter() -> usize {
    500
}
fn default_method() -> MethodKind {
    MethodKind::Dp
}
fn default_p() -> f64 {
    1.0
}
fn default_cfl() -> CflKind {
    CflKind::Error
}
fn default_directory() -> PathBuf {
    PathBuf::from("mfg-out")
}

/// Everything a run needs, built from a validated config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub model: MfgModel,
    pub disc: Discretization,
    pub solve: SolveConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().trim().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn lq_spec(&self) -> Option<Result<LqSpec, MfgError>> {
        match &self.model {
            ModelSection::Lq(lq) => Some(LqSpec::new(
                self.time.horizon,
                lq.coupling,
                lq.sigma,
                lq.mean0,
                lq.var0,
            )),
            ModelSection::CustomTable(_) => None,
        }
    }

    pub fn solve_config(&self) -> SolveConfig {
        let s = &self.solver;
        SolveConfig {
            damping: match s.damping {
                DampingKind::FictitiousPlay => Damping::FictitiousPlay,
                DampingKind::Constant => Damping::Constant(s.omega),
            },
            tol: s.tol,
            max_iter: s.max_iter,
            solver: match s.method {
                MethodKind::Dp => SolverKind::Dp,
                MethodKind::Lp => SolverKind::Lp,
            },
            p: s.p,
            seed: self.seed,
            tol_exploitability: s.tol_exploitability,
            strictify: s.strictify,
        }
    }

    /// Builds the model and discretization; a relative output directory is
    /// joined onto `base`.
    pub fn prepare(self, base: &Path) -> Result<Prepared, CliError> {
        let lattice = StateLattice::uniform(self.lattice.lower, self.lattice.upper, self.lattice.h)?;
        let grid = TimeGrid::new(self.time.horizon, self.time.steps)?;
        let cfl = match self.solver.cfl {
            CflKind::Error => CflPolicy::Error,
            CflKind::Restrict => CflPolicy::RestrictControls,
        };
        let model = match &self.model {
            ModelSection::Lq(lq) => {
                let spec = self.lq_spec().expect("lq family")?;
                lq_model(&spec, &lattice, controls(&lq.controls)?)?
            }
            ModelSection::CustomTable(table) => table_model(table, &lattice, &grid)?,
        };
        let solve = self.solve_config();
        solve.validate()?;
        let output_dir = if self.output.directory.is_absolute() {
            self.output.directory.clone()
        } else {
            base.join(&self.output.directory)
        };
        Ok(Prepared {
            config: self,
            model,
            disc: Discretization { lattice, grid, cfl },
            solve,
            output_dir,
        })
    }
}

fn controls(c: &ControlsSection) -> Result<ControlSpace, MfgError> {
    ControlSpace::uniform(c.lower, c.upper, c.count, c.convex)
}

fn field(f: &FieldSection) -> Result<TabulatedField, MfgError> {
    let terms = f
        .terms
        .iter()
        .map(|t| {
            Ok(FunctionalTerm {
                functional: PopulationFunctional::parse(&t.functional)?,
                weight: t.weight,
            })
        })
        .collect::<Result<Vec<_>, MfgError>>()?;
    Ok(TabulatedField::new(f.layers, f.values.clone(), terms))
}

fn table_model(t: &TableSection, lattice: &StateLattice, grid: &TimeGrid) -> Result<MfgModel, MfgError> {
    let space = controls(&t.controls)?;
    let k = t.constants;
    let coefficients = TableCoefficients::new(
        lattice,
        grid,
        &space,
        field(&t.drift)?,
        field(&t.volatility)?,
        field(&t.running)?,
        field(&t.terminal)?,
    )?;
    MfgModel::new(
        grid.horizon(),
        DiscreteMeasure::from_scalars(&t.initial.points, &t.initial.masses)?,
        GrowthConstants::new(k.c1, k.c2, k.c3, k.p, k.p_prime, k.p_sigma)?,
        space,
        Arc::new(coefficients),
    )
}
