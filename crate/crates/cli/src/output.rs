//! Text artifacts written by the subcommands. Floats always carry 17
//! significant digits so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use mfg_core::{format_float, ControlSpace, IterationRecord, RelaxedPolicy, StateLattice, StrictPolicy};

use crate::error::CliError;

pub const TRACE: &str = "trace.csv";
pub const SUMMARY: &str = "summary.toml";
pub const FLOW: &str = "flow.csv";
pub const POLICY: &str = "policy.csv";
pub const STRICT_POLICY: &str = "strict_policy.csv";
pub const RESOLVED: &str = "config.resolved.toml";
pub const LQ_CHECK: &str = "lq_check.csv";

/// A float as a TOML value (TOML spells the non-finite ones `nan`, `inf`).
pub fn toml_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format_float(x)
    }
}

pub fn trace_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from("iter,flow_residual,exploitability,value,mean_T\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iter,
            format_float(r.flow_residual),
            format_float(r.exploitability),
            format_float(r.value),
            format_float(r.mean_terminal)
        );
    }
    out
}

/// Rows `time_index, x, a, mass` for every charged `(k, node, atom)`.
pub fn policy_csv(policy: &RelaxedPolicy, lattice: &StateLattice, controls: &ControlSpace) -> String {
    let mut out = header(lattice.dimension(), controls.dimension(), "mass");
    for k in 0..policy.steps() {
        for i in 0..policy.nodes() {
            for (j, &q) in policy.distribution(k, i).iter().enumerate() {
                if q > 0.0 {
                    push_row(&mut out, k, lattice.node(i), controls.atom(j));
                    out.push_str(&format_float(q));
                    out.push('\n');
                }
            }
        }
    }
    out
}

/// Rows `time_index, x, a` with the selected action at every node.
pub fn strict_policy_csv(policy: &StrictPolicy, lattice: &StateLattice, controls: &ControlSpace) -> String {
    let mut out = header(lattice.dimension(), controls.dimension(), "");
    for k in 0..policy.steps() {
        for i in 0..policy.nodes() {
            push_row(&mut out, k, lattice.node(i), controls.atom(policy.action(k, i)));
            out.pop();
            out.push('\n');
        }
    }
    out
}

fn header(d: usize, m: usize, last: &str) -> String {
    let mut h = String::from("time_index");
    for i in 0..d {
        let _ = write!(h, ",x{i}");
    }
    for j in 0..m {
        let _ = write!(h, ",a{j}");
    }
    if !last.is_empty() {
        let _ = write!(h, ",{last}");
    }
    h.push('\n');
    h
}

fn push_row(out: &mut String, k: usize, x: &[f64], a: &[f64]) {
    let _ = write!(out, "{k}");
    for c in x.iter().chain(a) {
        out.push(',');
        out.push_str(&format_float(*c));
    }
    out.push(',');
}

/// Flat `key = value` TOML with optional sub-tables, built in order.
#[derive(Debug, Default)]
pub struct TomlDoc {
    text: String,
}

impl TomlDoc {
    pub fn float(&mut self, key: &str, v: f64) -> &mut Self {
        let _ = writeln!(self.text, "{key} = {}", toml_float(v));
        self
    }

    pub fn int(&mut self, key: &str, v: usize) -> &mut Self {
        let _ = writeln!(self.text, "{key} = {v}");
        self
    }

    pub fn boolean(&mut self, key: &str, v: bool) -> &mut Self {
        let _ = writeln!(self.text, "{key} = {v}");
        self
    }

    pub fn string(&mut self, key: &str, v: &str) -> &mut Self {
        let _ = writeln!(self.text, "{key} = {}", toml::Value::String(v.to_string()));
        self
    }

    pub fn table(&mut self, name: &str) -> &mut Self {
        let _ = writeln!(self.text, "\n[{name}]");
        self
    }

    pub fn finish(&self) -> String {
        self.text.clone()
    }
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))
}
