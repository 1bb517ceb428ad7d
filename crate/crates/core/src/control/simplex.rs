//! Dense tableau simplex for `max cᵀx  s.t.  Ax = b, x ≥ 0`, started from a
//! caller-supplied feasible basis.
//!
//! Entering columns follow Dantzig's rule; after a run of degenerate pivots
//! the rule switches to Bland's, which cannot cycle.

use crate::error::{MfgError, Result};

#[derive(Debug)]
pub(crate) struct Solution {
    pub x: Vec<f64>,
    pub pivots: usize,
}

struct Tableau {
    cols: usize,
    /// `rows × (cols + 1)`; the last column is the right-hand side.
    t: Vec<f64>,
    /// Reduced costs `c_j − c_Bᵀ B⁻¹ A_j`.
    z: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn width(&self) -> usize {
        self.cols + 1
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * self.width() + c]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width();
        let p = self.at(r, c);
        let (before, rest) = self.t.split_at_mut(r * w);
        let (row, after) = rest.split_at_mut(w);
        row.iter_mut().for_each(|v| *v /= p);
        row[c] = 1.0;
        let eliminate = |other: &mut [f64]| {
            let f = other[c];
            if f != 0.0 {
                for (o, &v) in other.iter_mut().zip(row.iter()) {
                    *o -= f * v;
                }
                other[c] = 0.0;
            }
        };
        before.chunks_mut(w).for_each(eliminate);
        after.chunks_mut(w).for_each(eliminate);
        let f = self.z[c];
        if f != 0.0 {
            for (o, &v) in self.z.iter_mut().zip(row.iter()) {
                *o -= f * v;
            }
            self.z[c] = 0.0;
        }
        self.basis[r] = c;
    }
}

/// `a` is row-major `rows × cols`. `basis[r]` is the column made basic in row
/// `r`; the induced basic solution must be feasible and pivoting on the
/// columns in row order must not meet a zero pivot.
pub(crate) fn maximize(
    rows: usize,
    cols: usize,
    a: &[f64],
    b: &[f64],
    c: &[f64],
    basis: &[usize],
) -> Result<Solution> {
    let w = cols + 1;
    let mut t = vec![0.0; rows * w];
    for r in 0..rows {
        t[r * w..r * w + cols].copy_from_slice(&a[r * cols..(r + 1) * cols]);
        t[r * w + cols] = b[r];
    }
    let mut z = c.to_vec();
    z.push(0.0);
    let mut tab = Tableau {
        cols,
        t,
        z,
        basis: vec![usize::MAX; rows],
    };
    for (r, &col) in basis.iter().enumerate() {
        if tab.at(r, col).abs() < 1e-12 {
            return Err(MfgError::KernelCorrupted(format!(
                "starting basis is singular at row {r}"
            )));
        }
        tab.pivot(r, col);
    }
    for r in 0..rows {
        let v = tab.at(r, cols);
        if v < -1e-9 {
            return Err(MfgError::KernelCorrupted(format!(
                "starting basis is infeasible (row {r} has value {v})"
            )));
        }
        if v < 0.0 {
            tab.t[r * w + cols] = 0.0;
        }
    }

    let scale = c.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let optimality = 1e-12 * scale;
    let max_pivots = 50 * (rows + cols) + 1000;
    let mut degenerate_run = 0usize;
    let mut pivots = 0usize;
    loop {
        let bland = degenerate_run > rows + 10;
        let mut entering = None;
        let mut best = optimality;
        for j in 0..cols {
            if tab.z[j] > best {
                entering = Some(j);
                if bland {
                    break;
                }
                best = tab.z[j];
            }
        }
        let Some(j) = entering else { break };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..rows {
            let coef = tab.at(r, j);
            if coef > 1e-11 {
                let ratio = tab.at(r, cols) / coef;
                let better = match leave {
                    None => true,
                    Some((lr, lratio)) => {
                        ratio < lratio - 1e-14
                            || (ratio <= lratio + 1e-14 && tab.basis[r] < tab.basis[lr])
                    }
                };
                if better {
                    leave = Some((r, ratio));
                }
            }
        }
        let Some((r, ratio)) = leave else {
            return Err(MfgError::KernelCorrupted(
                "occupation LP is unbounded".into(),
            ));
        };
        degenerate_run = if ratio <= 1e-14 { degenerate_run + 1 } else { 0 };
        tab.pivot(r, j);
        pivots += 1;
        if pivots > max_pivots {
            return Err(MfgError::KernelCorrupted(format!(
                "simplex did not terminate within {max_pivots} pivots"
            )));
        }
    }
    let mut x = vec![0.0; cols];
    for r in 0..rows {
        x[tab.basis[r]] = tab.at(r, cols).max(0.0);
    }
    Ok(Solution { x, pivots })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_textbook_problem() {
        // max 3x + 2y  s.t. x + y + s1 = 4, x + 3y + s2 = 6.
        let a = [1.0, 1.0, 1.0, 0.0, 1.0, 3.0, 0.0, 1.0];
        let sol = maximize(2, 4, &a, &[4.0, 6.0], &[3.0, 2.0, 0.0, 0.0], &[2, 3]).unwrap();
        assert!((sol.x[0] - 4.0).abs() < 1e-12 && sol.x[1].abs() < 1e-12);
    }

    #[test]
    fn unbounded_problem_is_reported() {
        // max x  s.t. x − y = 1.
        let err = maximize(1, 2, &[1.0, -1.0], &[1.0], &[1.0, 0.0], &[0]).unwrap_err();
        assert!(matches!(err, MfgError::KernelCorrupted(_)));
    }

    #[test]
    fn singular_start_is_reported() {
        assert!(maximize(1, 2, &[0.0, 1.0], &[1.0], &[1.0, 0.0], &[0]).is_err());
    }
}
