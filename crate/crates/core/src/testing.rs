//! Random small control problems for tests and benchmarks.

use rand::Rng;

use crate::control::{RelaxedPolicy, RewardTable};
use crate::kernel::TransitionKernel;

/// A random probability vector of length `n` with roughly `1 − sparsity` of
/// the entries zeroed (at least one entry stays positive).
pub fn random_simplex<R: Rng>(rng: &mut R, n: usize, sparsity: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < sparsity { rng.gen::<f64>() + 0.05 } else { 0.0 })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[rng.gen_range(0..n)] = 1.0;
    }
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Random kernel rows, rewards in `[−1, 1]`, and a random initial law.
pub fn random_problem<R: Rng>(
    rng: &mut R,
    nodes: usize,
    atoms: usize,
    steps: usize,
) -> (TransitionKernel, RewardTable, Vec<f64>) {
    let rows = (0..steps * nodes * atoms)
        .map(|_| {
            random_simplex(rng, nodes, 0.6)
                .into_iter()
                .enumerate()
                .filter(|&(_, p)| p > 0.0)
                .collect()
        })
        .collect();
    let kernel = TransitionKernel::from_rows(steps, nodes, atoms, rows).expect("valid random rows");
    let running = (0..steps * nodes * atoms)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let terminal = (0..nodes).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let rewards = RewardTable::new(steps, nodes, atoms, running, terminal).expect("valid rewards");
    (kernel, rewards, random_simplex(rng, nodes, 0.8))
}

/// A random relaxed policy.
pub fn random_policy<R: Rng>(rng: &mut R, steps: usize, nodes: usize, atoms: usize) -> RelaxedPolicy {
    let probs = (0..steps * nodes)
        .flat_map(|_| random_simplex(rng, atoms, 0.7))
        .collect();
    RelaxedPolicy::new(steps, nodes, atoms, probs).expect("valid random policy")
}
