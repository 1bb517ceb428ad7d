//! Delimited-text dump format for measures and flows.
//!
//! ```text
//! time_index,x0,mass
//! -1,0.0000000000000000e0,5.0000000000000000e-1
//! ```
//!
//! Standalone measures use time index `-1`. Floats carry 17 significant digits
//! so a dump/load round trip is lossless.

use super::{DiscreteMeasure, MeasureFlow};
use crate::error::{MfgError, Result};

/// Formats a float with 17 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn header(d: usize) -> String {
    let mut h = String::from("time_index");
    for i in 0..d {
        h.push_str(&format!(",x{i}"));
    }
    h.push_str(",mass\n");
    h
}

fn push_rows(out: &mut String, time_index: i64, mu: &DiscreteMeasure) {
    for (x, m) in mu.iter() {
        out.push_str(&time_index.to_string());
        for c in x {
            out.push(',');
            out.push_str(&format_float(*c));
        }
        out.push(',');
        out.push_str(&format_float(m));
        out.push('\n');
    }
}

pub fn dump_measure(mu: &DiscreteMeasure) -> String {
    let mut out = header(mu.dimension());
    push_rows(&mut out, -1, mu);
    out
}

pub fn dump_flow(flow: &MeasureFlow) -> String {
    let mut out = header(flow.dimension());
    for (k, mu) in flow.marginals().iter().enumerate() {
        push_rows(&mut out, k as i64, mu);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureRow {
    pub time_index: i64,
    pub point: Vec<f64>,
    pub mass: f64,
}

pub fn load_measure_rows(text: &str) -> Result<(usize, Vec<MeasureRow>)> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let head = lines
        .next()
        .ok_or_else(|| MfgError::Parse("empty measure file".into()))?;
    let columns: Vec<&str> = head.split(',').map(str::trim).collect();
    if columns.len() < 3 || columns[0] != "time_index" || columns[columns.len() - 1] != "mass" {
        return Err(MfgError::Parse(format!("bad measure header '{head}'")));
    }
    let d = columns.len() - 2;
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 2 {
            return Err(MfgError::Parse(format!(
                "row {}: expected {} fields, found {}",
                lineno + 2,
                d + 2,
                fields.len()
            )));
        }
        let bad = |f: &str| MfgError::Parse(format!("row {}: bad number '{f}'", lineno + 2));
        let time_index = fields[0].parse::<i64>().map_err(|_| bad(fields[0]))?;
        let mut nums = Vec::with_capacity(d + 1);
        for f in &fields[1..] {
            nums.push(f.parse::<f64>().map_err(|_| bad(f))?);
        }
        let mass = nums.pop().expect("mass column");
        rows.push(MeasureRow {
            time_index,
            point: nums,
            mass,
        });
    }
    Ok((d, rows))
}

/// Loads a standalone measure (every row must share one time index).
pub fn load_measure(text: &str) -> Result<DiscreteMeasure> {
    let (d, rows) = load_measure_rows(text)?;
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| r.time_index != first.time_index) {
            return Err(MfgError::Parse(
                "file holds several time indices; load it as a flow".into(),
            ));
        }
    }
    let points = rows.iter().flat_map(|r| r.point.iter().copied()).collect();
    let masses = rows.iter().map(|r| r.mass).collect();
    DiscreteMeasure::from_flat(d, points, masses)
}

/// Loads a flow whose time indices are `0..times.len()`.
pub fn load_flow(text: &str, times: &[f64]) -> Result<MeasureFlow> {
    let (d, rows) = load_measure_rows(text)?;
    let mut points = vec![Vec::new(); times.len()];
    let mut masses = vec![Vec::new(); times.len()];
    for r in rows {
        let k = usize::try_from(r.time_index)
            .ok()
            .filter(|&k| k < times.len())
            .ok_or_else(|| {
                MfgError::TimeGridMismatch(format!(
                    "time index {} outside 0..{}",
                    r.time_index,
                    times.len()
                ))
            })?;
        points[k].extend(r.point);
        masses[k].push(r.mass);
    }
    let marginals = points
        .into_iter()
        .zip(masses)
        .map(|(p, m)| DiscreteMeasure::from_flat(d, p, m))
        .collect::<Result<Vec<_>>>()?;
    MeasureFlow::new(times.to_vec(), marginals)
}
