//! Convolution with the scaled bump `ψ_n(x) = n^d ψ(n x)` onto a lattice.
//!
//! `ψ(u) ∝ exp(−1 / (1 − |u|²))` on the open unit ball. The continuous law
//! `ψ_n * δ_y` is discretized by sending every point `x` to the lattice node
//! obtained by truncating each coordinate of `x − y` toward zero, so every
//! point moves toward `y`. That keeps `W_p(ψ_n * μ, μ)^p ≤ ∫|x|^p ψ_n(x) dx`
//! exact after discretization, which plain point sampling of `ψ_n` does not.

use super::DiscreteMeasure;
use crate::error::{MfgError, Result};
use crate::kernel::StateLattice;

fn bump(r2: f64) -> f64 {
    if r2 < 1.0 {
        (-1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1].
fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    for i in 0..order.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            let p = if order == 1 { x } else { p1 };
            let prev = if order == 1 { 1.0 } else { p0 };
            dp = order as f64 * (x * p - prev) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[order - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule on `[a, b]`.
fn rule(a: f64, b: f64) -> Vec<(f64, f64)> {
    const PANELS: usize = 8;
    const ORDER: usize = 10;
    let (x, w) = gauss_legendre(ORDER);
    let width = (b - a) / PANELS as f64;
    let mut out = Vec::with_capacity(PANELS * ORDER);
    for panel in 0..PANELS {
        let lo = a + panel as f64 * width;
        for (xi, wi) in x.iter().zip(&w) {
            out.push((lo + 0.5 * width * (xi + 1.0), 0.5 * width * wi));
        }
    }
    out
}

/// The interval of scaled offsets truncated to cell offset `k` (cell width `r`).
fn cell(k: i64, r: f64) -> (f64, f64) {
    let (lo, hi) = match k {
        0 => (-r, r),
        k if k > 0 => (k as f64 * r, (k + 1) as f64 * r),
        k => (-((-k + 1) as f64) * r, -(-k) as f64 * r),
    };
    (lo.max(-1.0), hi.min(1.0))
}

/// `∫|x|^p ψ_n(x) dx` for the normalized bump in dimension `d`.
pub fn mollifier_moment(dimension: usize, n: u32, p: f64) -> f64 {
    let pts = rule(0.0, 1.0);
    let radial = |q: f64| -> f64 {
        pts.iter()
            .map(|&(r, w)| w * r.powf(q + dimension as f64 - 1.0) * bump(r * r))
            .sum()
    };
    radial(p) / radial(0.0) / (n as f64).powf(p)
}

/// Per-axis offset weights of the discretized `ψ_n`, flattened row-major over
/// offsets `-reach..=reach` on every axis.
fn offset_weights(widths: &[f64], n: u32) -> (Vec<i64>, Vec<f64>) {
    let d = widths.len();
    let scaled: Vec<f64> = widths.iter().map(|h| h * n as f64).collect();
    let reach: Vec<i64> = scaled.iter().map(|r| (1.0 / r).ceil() as i64).collect();
    let spans: Vec<usize> = reach.iter().map(|k| (2 * k + 1) as usize).collect();
    let total: usize = spans.iter().product();
    let mut offsets = Vec::with_capacity(total * d);
    let mut weights = Vec::with_capacity(total);
    let rules: Vec<Vec<Vec<(f64, f64)>>> = (0..d)
        .map(|axis| {
            (-reach[axis]..=reach[axis])
                .map(|k| {
                    let (lo, hi) = cell(k, scaled[axis]);
                    if hi > lo {
                        rule(lo, hi)
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        })
        .collect();
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = vec![0usize; d];
        for axis in (0..d).rev() {
            idx[axis] = rem % spans[axis];
            rem /= spans[axis];
        }
        let w = match d {
            1 => rules[0][idx[0]].iter().map(|&(u, w)| w * bump(u * u)).sum(),
            _ => {
                let mut acc = 0.0;
                for &(u, wu) in &rules[0][idx[0]] {
                    for &(v, wv) in &rules[1][idx[1]] {
                        acc += wu * wv * bump(u * u + v * v);
                    }
                }
                acc
            }
        };
        for axis in 0..d {
            offsets.push(idx[axis] as i64 - reach[axis]);
        }
        weights.push(w);
    }
    let z: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= z);
    (offsets, weights)
}

/// `ψ_n * μ` discretized onto `lattice`. Atoms of `mu` must be lattice nodes.
pub fn mollify(mu: &DiscreteMeasure, n: u32, lattice: &StateLattice) -> Result<DiscreteMeasure> {
    let d = lattice.dimension();
    if mu.dimension() != d {
        return Err(MfgError::DimensionMismatch {
            expected: d,
            found: mu.dimension(),
        });
    }
    if n == 0 {
        return Err(MfgError::InvalidArgument("mollifier index n must be positive".into()));
    }
    if d > 2 {
        return Err(MfgError::UnsupportedModel(format!("mollify in dimension {d}")));
    }
    let bandwidth = 1.0 / n as f64;
    let widths = lattice.widths();
    if let Some(&h) = widths.iter().find(|&&h| h > bandwidth * (1.0 + 1e-12)) {
        return Err(MfgError::LatticeTooCoarse {
            width: h,
            bandwidth,
        });
    }
    let (offsets, weights) = offset_weights(&widths, n);
    let mut dense = vec![0.0; lattice.len()];
    let mut multi = vec![0i64; d];
    for (x, mass) in mu.iter() {
        if mass == 0.0 {
            continue;
        }
        let node = lattice.index_of(x).ok_or_else(|| {
            MfgError::InvalidArgument(format!("atom {x:?} is not a lattice node"))
        })?;
        let base = lattice.multi_index(node);
        for (k, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for axis in 0..d {
                let count = lattice.axis_len(axis) as i64;
                // Out-of-lattice mass is clamped to the boundary node, which still lies toward x.
                multi[axis] = (base[axis] as i64 + offsets[k * d + axis]).clamp(0, count - 1);
            }
            dense[lattice.flat_index(&multi)] += mass * w;
        }
    }
    lattice.measure_from_dense(&dense)
}
