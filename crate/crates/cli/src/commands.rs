//! The subcommands. Each returns the process exit code on success and a
//! [`CliError`] otherwise.

use std::fmt::Write as _;
use std::path::Path;

use mfg_core::lq::{analytic_mean_control, analytic_mean_t, critical_c, feedback_error, LqMean};
use mfg_core::{
    best_response, build_kernel, check_convexity, flow_distance, format_float, iterate, load_flow,
    load_measure, validate_growth, wasserstein, ConvexityOptions, ConvexityTolerance, ConvexityVerdict,
    DiscreteMeasure, GrowthSample, SolveReport, SolveStatus,
};

use crate::config::{Prepared, RunConfig};
use crate::error::{CliError, EXIT_NOT_CONVERGED};
use crate::output::{self, TomlDoc};

/// Nodes with less marginal mass are ignored by the feedback comparison.
const FEEDBACK_MIN_MASS: f64 = 1e-4;

fn prepare(config_path: &Path) -> Result<Prepared, CliError> {
    RunConfig::load(config_path)?.prepare(Path::new("."))
}

fn status_code(status: SolveStatus) -> i32 {
    match status {
        SolveStatus::Converged => 0,
        SolveStatus::BudgetExhausted | SolveStatus::Oscillating => EXIT_NOT_CONVERGED,
    }
}

fn verdict(v: ConvexityVerdict) -> &'static str {
    match v {
        ConvexityVerdict::Pass => "pass",
        ConvexityVerdict::Fail => "fail",
        ConvexityVerdict::Inconclusive => "inconclusive",
    }
}

fn solve_summary(report: &SolveReport) -> String {
    let last = report.last();
    let mut doc = TomlDoc::default();
    doc.string("kind", "solve")
        .string("status", report.status.as_str())
        .int("iterations", report.iterations.len())
        .float("value", report.value)
        .float("mean_T", last.mean_terminal)
        .float("flow_residual", last.flow_residual)
        .float("min_flow_residual", report.min_residual())
        .float("exploitability", last.exploitability);
    doc.table("strict");
    match &report.strict {
        Some(s) => {
            doc.boolean("computed", true)
                .boolean("certified", s.certified)
                .float("flow_distance", s.flow_distance)
                .float("bound", s.bound)
                .float("max_drift_mismatch", s.gaps.max_drift_mismatch)
                .float("max_diffusion_mismatch", s.gaps.max_diffusion_mismatch)
                .float("min_f_surplus", s.gaps.min_f_surplus)
                .int("failed_nodes", s.gaps.failed_nodes)
                .float("value_loss_bound", s.gaps.value_loss_bound)
                .float("relaxed_value", s.gaps.relaxed_value)
                .float("strict_value", s.gaps.strict_value);
        }
        None => {
            doc.boolean("computed", false);
        }
    }
    if let Some(c) = &report.convexity {
        doc.table("convexity")
            .string("verdict", verdict(c.verdict))
            .int("draws", c.draws)
            .int("failures", c.failures)
            .float("worst_match_gap", c.worst_match_gap);
    }
    doc.finish()
}

fn write_solve_outputs(p: &Prepared, report: &SolveReport) -> Result<(), CliError> {
    let dir = &p.output_dir;
    output::ensure_dir(dir)?;
    output::write(dir, output::RESOLVED, &p.config.to_toml())?;
    output::write(dir, output::TRACE, &output::trace_csv(&report.iterations))?;
    output::write(dir, output::SUMMARY, &solve_summary(report))?;
    output::write(dir, output::FLOW, &mfg_core::dump_flow(&report.final_flow))?;
    let controls = p.model.controls();
    output::write(
        dir,
        output::POLICY,
        &output::policy_csv(&report.final_policy, &p.disc.lattice, controls),
    )?;
    if let Some(s) = &report.strict {
        output::write(
            dir,
            output::STRICT_POLICY,
            &output::strict_policy_csv(&s.policy, &p.disc.lattice, controls),
        )?;
    }
    Ok(())
}

fn status_line(report: &SolveReport) -> String {
    let last = report.last();
    format!(
        "status={} iterations={} mean_T={} flow_residual={} exploitability={}",
        report.status.as_str(),
        report.iterations.len(),
        format_float(last.mean_terminal),
        format_float(last.flow_residual),
        format_float(last.exploitability)
    )
}

/// Runs the damped equilibrium iteration and writes every artifact.
pub fn solve(config_path: &Path) -> Result<i32, CliError> {
    let p = prepare(config_path)?;
    let report = iterate(&p.model, &p.disc, &p.solve)?;
    write_solve_outputs(&p, &report)?;
    println!("{}", status_line(&report));
    Ok(status_code(report.status))
}

/// One application of the best-response map against the flow in `flow_path`.
pub fn best_response_cmd(config_path: &Path, flow_path: &Path) -> Result<i32, CliError> {
    let p = prepare(config_path)?;
    let text = std::fs::read_to_string(flow_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", flow_path.display())))?;
    let flow = load_flow(&text, &p.disc.grid.times())?;
    let kernel = build_kernel(&p.model, &flow, &p.disc.lattice, &p.disc.grid, p.disc.cfl)?;
    let br = best_response(&p.model, &flow, &p.disc.lattice, &p.disc.grid, &kernel, p.solve.solver)?;
    let residual = flow_distance(&flow, &br.flow, p.solve.p)?;
    let mean_t = br.flow.terminal().mean()[0];

    let dir = &p.output_dir;
    output::ensure_dir(dir)?;
    output::write(dir, output::RESOLVED, &p.config.to_toml())?;
    output::write(dir, output::FLOW, &mfg_core::dump_flow(&br.flow))?;
    output::write(
        dir,
        output::POLICY,
        &output::policy_csv(&br.policy, &p.disc.lattice, p.model.controls()),
    )?;
    let mut doc = TomlDoc::default();
    doc.string("kind", "best-response")
        .float("value", br.value)
        .float("mean_T", mean_t)
        .float("flow_residual", residual);
    output::write(dir, output::SUMMARY, &doc.finish())?;
    println!(
        "value={} mean_T={} flow_residual={}",
        format_float(br.value),
        format_float(mean_t),
        format_float(residual)
    );
    Ok(0)
}

/// Solves an LQ config and compares the result with the closed form.
pub fn lq_check(config_path: &Path) -> Result<i32, CliError> {
    let p = prepare(config_path)?;
    let spec = p
        .config
        .lq_spec()
        .ok_or_else(|| CliError::Config("lq-check needs model.family = \"lq\"".into()))??;
    let report = iterate(&p.model, &p.disc, &p.solve)?;
    write_solve_outputs(&p, &report)?;

    let solved_mean = report.last().mean_terminal;
    let solved_control = (solved_mean - spec.mean0) / spec.horizon;
    let mut table = String::from("quantity,analytic,solved,abs_error\n");
    let mut row = |name: &str, analytic: Option<f64>, solved: f64| {
        let (a, e) = match analytic {
            Some(a) => (format_float(a), format_float((a - solved).abs())),
            None => ("none".to_string(), "none".to_string()),
        };
        let _ = writeln!(table, "{name},{a},{},{e}", format_float(solved));
    };
    let analytic = analytic_mean_t(&spec);
    row("mean_T", analytic.value(), solved_mean);
    row(
        "mean_control",
        analytic.value().map(|m| analytic_mean_control(&spec, m)),
        solved_control,
    );
    if let Some(m) = analytic.value() {
        let err = feedback_error(
            &spec,
            &p.disc.lattice,
            &p.disc.grid,
            p.model.controls(),
            &report.final_flow,
            &report.final_policy,
            m,
            FEEDBACK_MIN_MASS,
        )?;
        row("feedback_max_error", Some(0.0), err);
    }
    output::write(&p.output_dir, output::LQ_CHECK, &table)?;

    print!("{table}");
    println!("critical_c,{}", format_float(critical_c(spec.horizon)?));
    if analytic == LqMean::NoSolution {
        println!("note,the coupling is critical: no equilibrium exists for this initial mean");
    }
    println!("{}", status_line(&report));
    Ok(status_code(report.status))
}

/// Samples the growth bounds over the lattice and probes convexity.
pub fn validate(config_path: &Path) -> Result<i32, CliError> {
    let p = prepare(config_path)?;
    let lattice = &p.disc.lattice;
    let grid = &p.disc.grid;
    let model = &p.model;
    let stride = (lattice.len() / 20).max(1);
    let nodes: Vec<usize> = (0..lattice.len()).step_by(stride).collect();
    let laws = [
        model.initial_law().clone(),
        DiscreteMeasure::dirac(lattice.node(0)),
        DiscreteMeasure::dirac(lattice.node(lattice.len() - 1)),
    ];
    let times = [0.0, 0.5 * grid.horizon(), grid.horizon()];
    let mut samples = Vec::new();
    for &t in &times {
        for &i in &nodes {
            for mu in &laws {
                for a in model.controls().atoms() {
                    samples.push(GrowthSample {
                        t,
                        x: lattice.node(i).to_vec(),
                        mu: mu.clone(),
                        a: a.to_vec(),
                    });
                }
            }
        }
    }
    let report = validate_growth(model, &samples);
    println!("samples,{}", samples.len());
    println!("check,worst_slack,passed");
    for c in &report.checks {
        println!("{},{},{}", c.name, format_float(c.worst_slack), c.passed);
    }
    for n in &report.notes {
        println!("note,{n}");
    }
    println!("convexity_x,verdict,worst_match_gap,failures,draws");
    let options = ConvexityOptions {
        seed: p.config.seed,
        tolerance: ConvexityTolerance::GridResolution,
        ..ConvexityOptions::default()
    };
    for i in [0, lattice.len() / 2, lattice.len() - 1] {
        let c = check_convexity(model, 0.0, lattice.node(i), model.initial_law(), &options);
        println!(
            "{},{},{},{},{}",
            format_float(lattice.node(i)[0]),
            verdict(c.verdict),
            format_float(c.worst_match_gap),
            c.failures,
            c.draws
        );
    }
    Ok(0)
}

/// Prints `W_p` between two measure dumps.
pub fn wasserstein_cmd(a: &Path, b: &Path, p: f64) -> Result<i32, CliError> {
    let read = |path: &Path| -> Result<DiscreteMeasure, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok(load_measure(&text)?)
    };
    let d = wasserstein(&read(a)?, &read(b)?, p)?;
    println!("{}", format_float(d));
    Ok(0)
}
