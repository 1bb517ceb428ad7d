//! Transportation simplex (MODI / u-v method) for discrete optimal transport.

use super::DiscreteMeasure;

/// An optimal coupling between the positive-mass atoms of two measures.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// `(source atom, target atom, mass)` for every basic cell with positive mass.
    pub flows: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

/// Solves `min Σ γ_ij c(x_i, y_j)` over couplings of `mu` and `nu`.
pub fn transport_plan<C>(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: C) -> TransportPlan
where
    C: Fn(&[f64], &[f64]) -> f64,
{
    let rows: Vec<usize> = (0..mu.len()).filter(|&i| mu.mass(i) > 0.0).collect();
    let cols: Vec<usize> = (0..nu.len()).filter(|&j| nu.mass(j) > 0.0).collect();
    let supply: Vec<f64> = rows.iter().map(|&i| mu.mass(i)).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| nu.mass(j)).collect();
    let c: Vec<f64> = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| (i, j)))
        .map(|(i, j)| cost(mu.point(i), nu.point(j)))
        .collect();
    let solved = TransportSimplex::solve(&supply, &demand, &c);
    TransportPlan {
        flows: solved
            .into_iter()
            .filter(|&(_, _, x)| x > 0.0)
            .map(|(i, j, x)| (rows[i], cols[j], x))
            .collect(),
        cost: 0.0,
    }
    .with_cost(mu, nu, cost)
}

impl TransportPlan {
    fn with_cost<C>(mut self, mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: C) -> Self
    where
        C: Fn(&[f64], &[f64]) -> f64,
    {
        self.cost = self
            .flows
            .iter()
            .map(|&(i, j, x)| x * cost(mu.point(i), nu.point(j)))
            .sum();
        self
    }
}

struct TransportSimplex<'a> {
    m: usize,
    n: usize,
    cost: &'a [f64],
    /// Basic cells `(row, col)` forming a spanning tree of the bipartite graph.
    basis: Vec<(usize, usize)>,
    flow: Vec<f64>,
}

impl<'a> TransportSimplex<'a> {
    fn solve(supply: &[f64], demand: &[f64], cost: &'a [f64]) -> Vec<(usize, usize, f64)> {
        let (m, n) = (supply.len(), demand.len());
        if m == 0 || n == 0 {
            return Vec::new();
        }
        let mut s = Self::north_west(supply, demand, cost);
        let scale = cost.iter().fold(0.0f64, |a, c| a.max(c.abs())).max(1.0);
        let eps = 1e-12 * scale;
        let max_iter = 50 * (m + n) * (m + n) + 100;
        let mut bland = false;
        for iter in 0..max_iter {
            if iter == max_iter / 2 {
                bland = true;
            }
            let (u, v) = s.potentials();
            let mut entering = None;
            let mut best = -eps;
            'scan: for i in 0..m {
                for j in 0..n {
                    let reduced = s.cost[i * n + j] - u[i] - v[j];
                    if reduced < best {
                        entering = Some((i, j));
                        if bland {
                            break 'scan;
                        }
                        best = reduced;
                    }
                }
            }
            match entering {
                Some(cell) => s.pivot(cell),
                None => break,
            }
        }
        debug_assert!(s.basis.len() == m + n - 1 && s.basis.len() == s.flow.len());
        s.basis
            .iter()
            .zip(&s.flow)
            .map(|(&(i, j), &x)| (i, j, x))
            .collect()
    }

    fn north_west(supply: &[f64], demand: &[f64], cost: &'a [f64]) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let total_s: f64 = supply.iter().sum();
        let total_d: f64 = demand.iter().sum();
        let mut ra: Vec<f64> = supply.iter().map(|s| s / total_s).collect();
        let mut rb: Vec<f64> = demand.iter().map(|d| d / total_d).collect();
        let (mut i, mut j) = (0, 0);
        let mut basis = Vec::with_capacity(m + n - 1);
        let mut flow = Vec::with_capacity(m + n - 1);
        loop {
            let x = ra[i].min(rb[j]);
            basis.push((i, j));
            flow.push(x);
            if i == m - 1 && j == n - 1 {
                break;
            }
            let supply_done = ra[i] <= rb[j];
            ra[i] -= x;
            rb[j] -= x;
            if j == n - 1 || (supply_done && i < m - 1) {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self {
            m,
            n,
            cost,
            basis,
            flow,
        }
    }

    /// Node ids: rows `0..m`, columns `m..m+n`.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j)) in self.basis.iter().enumerate() {
            adj[i].push((self.m + j, k));
            adj[self.m + j].push((i, k));
        }
        adj
    }

    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let adj = self.adjacency();
        let mut pot = vec![f64::NAN; self.m + self.n];
        let mut stack = vec![0usize];
        pot[0] = 0.0;
        while let Some(node) = stack.pop() {
            for &(next, k) in &adj[node] {
                if pot[next].is_nan() {
                    let (i, j) = self.basis[k];
                    let c = self.cost[i * self.n + j];
                    pot[next] = c - pot[node];
                    stack.push(next);
                }
            }
        }
        let (u, v) = pot.split_at(self.m);
        (u.to_vec(), v.to_vec())
    }

    fn pivot(&mut self, (ei, ej): (usize, usize)) {
        // Tree path from row ei to column ej; together with the entering cell it closes a cycle.
        let adj = self.adjacency();
        let total = self.m + self.n;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; total];
        let mut seen = vec![false; total];
        let mut queue = std::collections::VecDeque::from([ei]);
        seen[ei] = true;
        let target = self.m + ej;
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, k));
                    queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = target;
        while let Some((prev, k)) = parent[node] {
            path.push(k);
            node = prev;
        }
        // `path` runs from the column end back to row `ei`; the edge touching
        // the entering column loses mass, then signs alternate.
        let mut theta = f64::INFINITY;
        let mut leaving = None;
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 && self.flow[k] < theta {
                theta = self.flow[k];
                leaving = Some(pos);
            }
        }
        let leaving = leaving.expect("cycle has a decreasing edge");
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                self.flow[k] = (self.flow[k] - theta).max(0.0);
            } else {
                self.flow[k] += theta;
            }
        }
        let k = path[leaving];
        self.basis[k] = (ei, ej);
        self.flow[k] = theta;
    }
}
