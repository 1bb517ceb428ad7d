//! The best response as a linear program over occupation measures.
//!
//! Variables are `m_k(x, a)` for admissible `(k, x, a)`. One equality row per
//! `(k, x′)` fixes `Σ_a m_0(x′, a) = λ(x′)` and
//! `Σ_a m_{k+1}(x′, a) = Σ_{x,a} m_k(x, a) K_k(x′ | x, a)`. The terminal
//! marginal is eliminated by folding `g` through the last kernel slice into
//! the objective. The policy that plays the first admissible atom everywhere
//! gives a feasible, lower-block-triangular starting basis, so no phase one
//! is needed.

use super::simplex;
use super::{objective_unchecked, ControlProblem, OccupationMeasure, OCCUPATION_TOLERANCE};
use crate::error::{MfgError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub occupation: OccupationMeasure,
    pub value: f64,
    pub pivots: usize,
}

pub fn solve_lp(problem: &ControlProblem<'_>) -> Result<LpSolution> {
    let kernel = problem.kernel();
    let (steps, nodes, atoms) = (kernel.steps(), kernel.nodes(), kernel.atoms());
    let mut columns = Vec::new();
    let mut column_of = vec![usize::MAX; steps * nodes * atoms];
    for k in 0..steps {
        for i in 0..nodes {
            for j in 0..atoms {
                if kernel.is_admissible(k, i, j) {
                    column_of[(k * nodes + i) * atoms + j] = columns.len();
                    columns.push((k, i, j));
                }
            }
        }
    }
    let (rows, cols) = (steps * nodes, columns.len());
    let mut a = vec![0.0; rows * cols];
    let mut cost = vec![0.0; cols];
    let terminal = problem.rewards().terminal();
    for (col, &(k, i, j)) in columns.iter().enumerate() {
        a[(k * nodes + i) * cols + col] += 1.0;
        let (targets, probs) = kernel.row(k, i, j);
        if k + 1 < steps {
            for (&x, &p) in targets.iter().zip(probs) {
                a[((k + 1) * nodes + x as usize) * cols + col] -= p;
            }
        }
        cost[col] = problem.rewards().running(k, i, j);
        if k + 1 == steps {
            cost[col] += kernel.expectation(k, i, j, terminal);
        }
    }
    let mut b = vec![0.0; rows];
    b[..nodes].copy_from_slice(problem.initial());
    let mut basis = Vec::with_capacity(rows);
    for k in 0..steps {
        for i in 0..nodes {
            let j = kernel.first_admissible(k, i).ok_or_else(|| {
                MfgError::KernelCorrupted(format!("no admissible control at step {k}, node {i}"))
            })?;
            basis.push(column_of[(k * nodes + i) * atoms + j]);
        }
    }
    let solution = simplex::maximize(rows, cols, &a, &b, &cost, &basis)?;

    let mut weights = vec![0.0; steps * nodes * atoms];
    for (col, &(k, i, j)) in columns.iter().enumerate() {
        weights[(k * nodes + i) * atoms + j] = solution.x[col];
    }
    let mut rho = vec![0.0; nodes];
    for i in 0..nodes {
        for j in 0..atoms {
            let w = weights[((steps - 1) * nodes + i) * atoms + j];
            if w != 0.0 {
                kernel.scatter(steps - 1, i, j, w, &mut rho);
            }
        }
    }
    let occupation = OccupationMeasure::new(steps, nodes, atoms, weights, rho)?;
    occupation
        .validate(kernel, problem.initial(), OCCUPATION_TOLERANCE)
        .map_err(|e| MfgError::KernelCorrupted(format!("LP solution violates invariants: {e}")))?;
    let value = objective_unchecked(problem, &occupation);
    Ok(LpSolution {
        occupation,
        value,
        pivots: solution.pivots,
    })
}
