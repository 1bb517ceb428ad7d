//! End-to-end acceptance checks. Every criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.
//!
//! Run with `cargo test -p mfg-cli --test acceptance -- --nocapture` to see
//! the report.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use mfg_core::lq::{analytic_mean_t, feedback_error, lq_model, LqSpec};
use mfg_core::measures::transport_plan;
use mfg_core::testing::{random_policy, random_problem, random_simplex};
use mfg_core::{
    build_kernel, empirical_marginals, iterate, load_flow, mollifier_moment, mollify, shipped,
    simulate_range, solve_dp, solve_lp, strictify, truncation_ladder, verify_mimicking,
    wasserstein, wasserstein_1d, CflPolicy, ControlProblem, ControlSpace, Damping, DiscreteMeasure,
    Discretization, FnHistoryPolicy, MeasureFlow, MfgModel, MimickingOptions, PolicyRef,
    RelaxedPolicy, SolveConfig, SolveStatus, StateLattice, StrictifyOptions, TimeGrid,
};

// Tolerances pinned by the acceptance criteria.
const LQ_MEAN_TOL: f64 = 0.02;
const LQ_EXPLOITABILITY_TOL: f64 = 1e-3;
const LQ_RUNTIME_EXPECTATION: Duration = Duration::from_secs(60);
const NONEXISTENCE_FACTOR: f64 = 10.0;
const FEEDBACK_MIN_MASS: f64 = 1e-4;
const DUALITY_TOL: f64 = 1e-8;
const DUALITY_RUNTIME: Duration = Duration::from_secs(5);
const MIMICKING_TOL: f64 = 1e-12;
const MIMICKING_MAX_PATHS: u64 = 10_000;
const STRICT_VALUE_TOL: f64 = 1e-9;
const TRANSPORT_TOL: f64 = 1e-9;
const SIMULATION_PATHS: usize = 100_000;
const SIMULATION_TV_TOL: f64 = 0.02;
const BOUNDARY_MASS_TOL: f64 = 1e-6;
const LADDER_VALUE_TOL: f64 = 1e-3;
const LADDER_MOMENT_FACTOR: f64 = 1.5;

type Outcome = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Copies a shipped config into `dir` with its output directory redirected there.
fn redirected_config(name: &str, dir: &Path) -> std::path::PathBuf {
    let text = std::fs::read_to_string(configs().join(name)).unwrap();
    let out = dir.join("out");
    let text: Vec<String> = text
        .lines()
        .map(|l| {
            if l.trim_start().starts_with("directory") {
                format!("directory = {:?}", out.display().to_string())
            } else {
                l.to_string()
            }
        })
        .collect();
    let path = dir.join(name);
    std::fs::write(&path, text.join("\n")).unwrap();
    path
}

fn read_table(path: &Path) -> toml::Table {
    toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn lq_setup(c: f64, sigma: f64, lattice: (f64, f64, f64), atoms: (f64, usize), steps: usize) -> (LqSpec, MfgModel, Discretization) {
    let spec = LqSpec::new(1.0, c, sigma, 1.0, 0.04).unwrap();
    let lattice = StateLattice::uniform(lattice.0, lattice.1, lattice.2).unwrap();
    let controls = ControlSpace::uniform(-atoms.0, atoms.0, atoms.1, true).unwrap();
    let model = lq_model(&spec, &lattice, controls).unwrap();
    let disc = Discretization {
        lattice,
        grid: TimeGrid::new(1.0, steps).unwrap(),
        cfl: CflPolicy::RestrictControls,
    };
    (spec, model, disc)
}

fn boundary_mass(flow: &MeasureFlow, lattice: &StateLattice) -> f64 {
    flow.marginals()
        .iter()
        .map(|mu| {
            let dense = lattice.dense_from_measure(mu).unwrap();
            dense[0] + dense[dense.len() - 1]
        })
        .fold(0.0, f64::max)
}

fn lq_equilibrium_mean() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let cfg = redirected_config("lq.toml", tmp.path());
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_mfg"))
        .env("RAYON_NUM_THREADS", "1")
        .arg("solve")
        .arg(&cfg)
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    let code = status.status.code();
    let out = tmp.path().join("out");
    let summary = read_table(&out.join("summary.toml"));
    let mean = summary["mean_T"].as_float().unwrap();
    let exploitability = summary["exploitability"].as_float().unwrap();
    let converged = summary["status"].as_str() == Some("CONVERGED");

    let flow_text = std::fs::read_to_string(out.join("flow.csv")).unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let flow = load_flow(&flow_text, &grid.times()).unwrap();
    let lattice = StateLattice::uniform(-1.0, 3.0, 0.02).unwrap();
    let edge = boundary_mass(&flow, &lattice);

    let detail = format!(
        "exit {code:?}, status {}, mean_T {mean:.6} (target 1/3, tol {LQ_MEAN_TOL}), exploitability {exploitability:.2e} \
         (tol {LQ_EXPLOITABILITY_TOL:.0e}), iterations {}, boundary mass {edge:.1e}, runtime {:.1} s (expected ≤ {} s)",
        summary["status"].as_str().unwrap_or("?"),
        summary["iterations"].as_integer().unwrap_or(-1),
        elapsed.as_secs_f64(),
        LQ_RUNTIME_EXPECTATION.as_secs()
    );
    ensure(
        code == Some(0)
            && converged
            && (mean - 1.0 / 3.0).abs() <= LQ_MEAN_TOL
            && exploitability <= LQ_EXPLOITABILITY_TOL
            && edge < BOUNDARY_MASS_TOL,
        detail,
    )
}

fn nonexistence_detection() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let cfg = redirected_config("lq-critical.toml", tmp.path());
    let status = Command::new(env!("CARGO_BIN_EXE_mfg")).arg("solve").arg(&cfg).output().unwrap();
    let code = status.status.code();
    let resolved = read_table(&tmp.path().join("out/config.resolved.toml"));
    let tol = resolved["solver"]["tol"].as_float().unwrap();
    let trace = std::fs::read_to_string(tmp.path().join("out/trace.csv")).unwrap();
    let residuals: Vec<f64> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let min = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(
        code == Some(2) && min > NONEXISTENCE_FACTOR * tol && residuals.len() == 500,
        format!(
            "exit {code:?}, {} iterations, min flow_residual {min:.4e} vs {:.0e}",
            residuals.len(),
            NONEXISTENCE_FACTOR * tol
        ),
    )
}

fn off_critical_sweep() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for c in [-1.0, 0.0, 0.5, 1.0, 2.0] {
        let (spec, model, disc) = lq_setup(c, 0.1, (-1.0, 3.0, 0.02), (2.0, 41), 100);
        let config = SolveConfig {
            damping: Damping::Constant(0.5),
            ..SolveConfig::default()
        };
        let report = iterate(&model, &disc, &config).unwrap();
        let target = analytic_mean_t(&spec).value().unwrap();
        let mean = report.last().mean_terminal;
        let tol = 3.0 * (disc.lattice.widths()[0] + disc.grid.dt());
        let err = feedback_error(
            &spec,
            &disc.lattice,
            &disc.grid,
            model.controls(),
            &report.final_flow,
            &report.final_policy,
            target,
            FEEDBACK_MIN_MASS,
        )
        .unwrap();
        let pass = report.status == SolveStatus::Converged && (mean - target).abs() <= LQ_MEAN_TOL && err <= tol;
        ok &= pass;
        lines.push(format!(
            "c={c}: {} mean_T {mean:.4}/{target:.4} feedback err {err:.3} (tol {tol:.2})",
            report.status.as_str()
        ));
    }
    ensure(ok, lines.join("; "))
}

fn lp_dp_duality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let nodes = rng.gen_range(1..=5);
        let atoms = rng.gen_range(1..=3);
        let steps = rng.gen_range(1..=4);
        let (kernel, rewards, initial) = random_problem(&mut rng, nodes, atoms, steps);
        let problem = ControlProblem::new(&kernel, rewards, initial).unwrap();
        let (lp, dp) = (solve_lp(&problem).unwrap(), solve_dp(&problem).unwrap());
        worst = worst.max((lp.value - dp.value).abs());
    }
    let examples = shipped::all().unwrap();
    for ex in &examples {
        let kernel = build_kernel(&ex.model, &ex.flow, &ex.disc.lattice, &ex.disc.grid, ex.disc.cfl).unwrap();
        let problem = ControlProblem::from_model(&ex.model, &ex.flow, &ex.disc.lattice, &ex.disc.grid, &kernel).unwrap();
        let (lp, dp) = (solve_lp(&problem).unwrap(), solve_dp(&problem).unwrap());
        worst = worst.max((lp.value - dp.value).abs());
    }
    let elapsed = start.elapsed();
    ensure(
        worst <= DUALITY_TOL && elapsed <= DUALITY_RUNTIME,
        format!(
            "20 random + {} shipped instances, max |LP − DP| {worst:.2e} (tol {DUALITY_TOL:.0e}), {:.2} s (limit {} s)",
            examples.len(),
            elapsed.as_secs_f64(),
            DUALITY_RUNTIME.as_secs()
        ),
    )
}

fn mimicking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut positive_path_gap = 0usize;
    let mut max_paths = 0u64;
    for _ in 0..20 {
        let nodes = rng.gen_range(2..=4);
        let atoms = rng.gen_range(2..=3);
        let steps = rng.gen_range(2..=4);
        let (kernel, _, initial) = random_problem(&mut rng, nodes, atoms, steps);
        // action law indexed by (step, a hash of the whole history)
        let buckets = 7;
        let table: Vec<Vec<f64>> = (0..steps * buckets).map(|_| random_simplex(&mut rng, atoms, 0.3)).collect();
        let policy = FnHistoryPolicy(move |k: usize, h: &[usize], out: &mut [f64]| {
            let hash = h.iter().enumerate().map(|(t, &x)| (t + 1) * (x + 3)).sum::<usize>();
            out.copy_from_slice(&table[k * buckets + hash % buckets]);
        });
        let options = MimickingOptions {
            budget: MIMICKING_MAX_PATHS,
            monte_carlo: None,
            path_law: true,
        };
        let report = verify_mimicking(&kernel, &policy, &initial, &options).unwrap();
        assert!(report.exact);
        worst = worst.max(report.marginal_distance);
        max_paths = max_paths.max(report.paths);
        if report.path_law_distance.unwrap() > 0.0 {
            positive_path_gap += 1;
        }
    }
    ensure(
        worst <= MIMICKING_TOL && positive_path_gap >= 1,
        format!(
            "20 history-dependent policies (≤ {max_paths} paths each): max marginal TV {worst:.2e} (tol {MIMICKING_TOL:.0e}), \
             path-law TV > 0 on {positive_path_gap}/20"
        ),
    )
}

fn strictification() -> Outcome {
    let (_, model, disc) = lq_setup(1.0, 0.3, (-1.0, 2.0, 0.25), (1.0, 9), 16);
    let (lattice, grid) = (&disc.lattice, &disc.grid);
    let flow = MeasureFlow::constant(grid.times(), model.initial_law()).unwrap();
    let kernel = build_kernel(&model, &flow, lattice, grid, CflPolicy::Error).unwrap();
    let problem = ControlProblem::from_model(&model, &flow, lattice, grid, &kernel).unwrap();
    let (steps, nodes, atoms) = (grid.steps(), lattice.len(), model.controls().len());
    let zero = atoms / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    // Representable: equal weights on two atoms of one sign (zero counts as
    // either), symmetric about an atom, so the barycenter is itself an atom.
    let mut worst_loss = f64::NEG_INFINITY;
    let mut worst_mismatch = 0.0f64;
    for _ in 0..10 {
        let mut probs = vec![0.0; steps * nodes * atoms];
        for row in probs.chunks_mut(atoms) {
            let negative = rng.gen_bool(0.5);
            let (lo, hi) = if negative { (0, zero) } else { (zero, atoms - 1) };
            let center = rng.gen_range(lo..=hi);
            let reach = (center - lo).min(hi - center);
            let d = rng.gen_range(0..=reach);
            row[center - d] += 0.5;
            row[center + d] += 0.5;
        }
        let q = RelaxedPolicy::new(steps, nodes, atoms, probs).unwrap();
        let (_, gaps) = strictify(&model, &flow, lattice, grid, &problem, &q, &StrictifyOptions::default()).unwrap();
        worst_loss = worst_loss.max(gaps.relaxed_value - gaps.strict_value);
        worst_mismatch = worst_mismatch.max(gaps.max_drift_mismatch);
    }

    // Not representable: arbitrary relaxed rows; the reported bound must cover the loss.
    let mut bound_violations = 0;
    let mut max_loss_ratio = 0.0f64;
    for _ in 0..10 {
        let q = random_policy(&mut rng, steps, nodes, atoms);
        let (_, gaps) = strictify(&model, &flow, lattice, grid, &problem, &q, &StrictifyOptions::default()).unwrap();
        let loss = gaps.relaxed_value - gaps.strict_value;
        if loss > gaps.value_loss_bound + 1e-12 {
            bound_violations += 1;
        }
        if gaps.value_loss_bound > 0.0 {
            max_loss_ratio = max_loss_ratio.max(loss / gaps.value_loss_bound);
        }
    }
    ensure(
        worst_loss <= STRICT_VALUE_TOL && worst_mismatch == 0.0 && bound_violations == 0,
        format!(
            "representable: max (relaxed − strict) {worst_loss:.2e} (tol {STRICT_VALUE_TOL:.0e}), drift mismatch {worst_mismatch:e}; \
             non-representable: {bound_violations}/10 bound violations, max loss/bound {max_loss_ratio:.3}"
        ),
    )
}

fn random_measure(rng: &mut ChaCha8Rng, atoms: usize) -> DiscreteMeasure {
    let points: Vec<f64> = (0..atoms).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let masses = random_simplex(rng, atoms, 0.0);
    DiscreteMeasure::merged(1, points, masses).unwrap()
}

fn wasserstein_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_lp = 0.0f64;
    for i in 0..50 {
        let p = [1.0, 1.5, 2.0][i % 3];
        let (m, n) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let mu = random_measure(&mut rng, m);
        let nu = random_measure(&mut rng, n);
        let quantile = wasserstein_1d(&mu, &nu, p).unwrap();
        let plan = transport_plan(&mu, &nu, |x, y| (x[0] - y[0]).abs().powf(p));
        worst_lp = worst_lp.max((quantile - plan.cost.powf(1.0 / p)).abs());
    }

    let mut axiom_failures = 0;
    for i in 0..30 {
        let p = [1.0, 2.0, 3.0][i % 3];
        let (a, b, c) = (
            random_measure(&mut rng, 6),
            random_measure(&mut rng, 6),
            random_measure(&mut rng, 6),
        );
        let d = |x: &DiscreteMeasure, y: &DiscreteMeasure| wasserstein(x, y, p).unwrap();
        let holds = d(&a, &a) == 0.0
            && d(&a, &b) > 0.0
            && (d(&a, &b) - d(&b, &a)).abs() <= 1e-12
            && d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12;
        if !holds {
            axiom_failures += 1;
        }
    }

    let lattice = StateLattice::uniform(-3.0, 3.0, 0.01).unwrap();
    let mut mollify_cases = 0;
    let mut worst_ratio = 0.0f64;
    for n in [1u32, 2, 5, 10, 50] {
        for p in [1.0, 2.0] {
            for _ in 0..3 {
                let nodes: Vec<usize> = (0..4).map(|_| rng.gen_range(150..=450)).collect();
                let points: Vec<f64> = nodes.iter().map(|&i| lattice.node(i)[0]).collect();
                let mu = DiscreteMeasure::merged(1, points, random_simplex(&mut rng, 4, 0.0)).unwrap();
                let smoothed = mollify(&mu, n, &lattice).unwrap();
                let lhs = wasserstein_1d(&smoothed, &mu, p).unwrap().powf(p);
                worst_ratio = worst_ratio.max(lhs / mollifier_moment(1, n, p));
                mollify_cases += 1;
            }
        }
    }
    ensure(
        worst_lp <= TRANSPORT_TOL && axiom_failures == 0 && worst_ratio <= 1.0,
        format!(
            "50 pairs: max |quantile − LP| {worst_lp:.2e} (tol {TRANSPORT_TOL:.0e}); metric axioms failed on {axiom_failures}/30 triples; \
             mollification: max d_p^p / ∫|x|^p ψ_n {worst_ratio:.3} over {mollify_cases} cases"
        ),
    )
}

fn kernel_sde_consistency() -> Outcome {
    let (_, model, disc) = lq_setup(1.0, 1.0, (-4.0, 5.0, 0.05), (2.0, 41), 500);
    let config = SolveConfig {
        damping: Damping::Constant(0.5),
        ..SolveConfig::default()
    };
    let report = iterate(&model, &disc, &config).unwrap();
    let (lattice, grid) = (&disc.lattice, &disc.grid);
    let flow = &report.final_flow;
    let policy = &report.final_policy;
    let kernel = build_kernel(&model, flow, lattice, grid, disc.cfl).unwrap();

    let mut exact = vec![lattice.dense_from_measure(model.initial_law()).unwrap()];
    for k in 0..grid.steps() {
        let next = kernel.push_dense(k, &exact[k], policy).unwrap();
        exact.push(next);
    }
    let edge = exact.iter().map(|m| m[0] + m[m.len() - 1]).fold(0.0, f64::max);

    let chunk = 20_000;
    let mut empirical = vec![vec![0.0; lattice.len()]; grid.steps() + 1];
    for c in 0..SIMULATION_PATHS / chunk {
        let bundle = simulate_range(&model, flow, lattice, grid, PolicyRef::Relaxed(policy), (c * chunk) as u64, chunk, 7).unwrap();
        for (acc, part) in empirical.iter_mut().zip(empirical_marginals(&bundle, lattice)) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b * chunk as f64 / SIMULATION_PATHS as f64;
            }
        }
    }
    let worst_tv = exact
        .iter()
        .zip(&empirical)
        .map(|(e, m)| 0.5 * e.iter().zip(m).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max);

    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_range(&model, flow, lattice, grid, PolicyRef::Relaxed(policy), 0, 4000, 99).unwrap())
    };
    let (one, four) = (run(1), run(4));
    let reproducible = one == four;

    ensure(
        report.status == SolveStatus::Converged
            && worst_tv <= SIMULATION_TV_TOL
            && reproducible
            && edge < BOUNDARY_MASS_TOL,
        format!(
            "{} after {} iterations; {SIMULATION_PATHS} paths: max per-time TV {worst_tv:.4} (tol {SIMULATION_TV_TOL}); \
             boundary mass {edge:.1e}; 1 vs 4 threads bit-identical: {reproducible}",
            report.status.as_str(),
            report.iterations.len()
        ),
    )
}

fn truncation_ladder_check() -> Outcome {
    let (_, model, disc) = lq_setup(1.0, 0.2, (-1.0, 3.0, 0.05), (4.0, 81), 100);
    let config = SolveConfig {
        damping: Damping::Constant(0.5),
        ..SolveConfig::default()
    };
    // r_n = √(n / 2c₁) with c₁ = 1 gives radii 1, 2, 4
    let ladder = truncation_ladder(&model, &disc, &config, &[2, 8, 32]).unwrap();
    let mut values = Vec::new();
    let mut moments = Vec::new();
    let mut radii = Vec::new();
    for e in &ladder.entries {
        radii.push(e.radius);
        match &e.outcome {
            Ok(r) if r.status == SolveStatus::Converged => values.push(r.value),
            _ => return Err(format!("level n={} (radius {}) did not converge", e.n, e.radius)),
        }
        moments.push(e.moment.unwrap());
    }
    let value_gap = (values[1] - values[2]).abs();
    let ratios: Vec<f64> = moments.iter().map(|m| m / moments[0]).collect();
    let moments_ok = ratios
        .iter()
        .all(|&r| (1.0 / LADDER_MOMENT_FACTOR..=LADDER_MOMENT_FACTOR).contains(&r));
    ensure(
        radii == [1.0, 2.0, 4.0] && value_gap <= LADDER_VALUE_TOL && moments_ok && ladder.moment_bound_ok,
        format!(
            "radii {radii:?}: values {values:.6?}, |v(2) − v(4)| {value_gap:.2e} (tol {LADDER_VALUE_TOL:.0e}); \
             p′-moment ratios {ratios:.3?} (within {LADDER_MOMENT_FACTOR}×)"
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("LQ equilibrium mean", lq_equilibrium_mean),
        ("nonexistence detection", nonexistence_detection),
        ("off-critical sweep", off_critical_sweep),
        ("LP = DP duality", lp_dp_duality),
        ("mimicking", mimicking),
        ("strictification", strictification),
        ("Wasserstein correctness", wasserstein_correctness),
        ("kernel/SDE consistency", kernel_sde_consistency),
        ("truncation ladder", truncation_ladder_check),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(detail) => format!("criterion {} [{name}]: PASS ({secs:.1} s) {detail}", i + 1),
            Err(detail) => {
                failed.push(i + 1);
                format!("criterion {} [{name}]: FAIL ({secs:.1} s) {detail}", i + 1)
            }
        };
        // bypass the harness's output capture so the report shows up in
        // plain `cargo test` runs, not only under `--nocapture`
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").and_then(|_| out.flush()).expect("write report line");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
