//! Sampling validators for the growth bounds and the convexity condition.
//!
//! Neither check is a proof: growth bounds are evaluated at user-supplied
//! sample points, and convexity is probed with random convex combinations of
//! the control atoms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use super::{MfgModel, Population};
use crate::measures::{euclid, moment, norm, DiscreteMeasure};

/// One point `(t, x, μ, a)` at which growth bounds are evaluated.
#[derive(Debug, Clone)]
pub struct GrowthSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub mu: DiscreteMeasure,
    pub a: Vec<f64>,
}

/// Outcome of one inequality over the whole sample cloud. Slack is
/// `lhs − rhs`, so a positive value is a violation.
#[derive(Debug, Clone, PartialEq)]
pub struct InequalityCheck {
    pub name: &'static str,
    pub worst_slack: f64,
    pub worst_sample: Option<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<InequalityCheck>,
    pub notes: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&InequalityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Slack below which an inequality counts as satisfied.
const SLACK_TOLERANCE: f64 = 1e-12;

pub const LIPSCHITZ: &str = "lipschitz";
pub const DRIFT_GROWTH: &str = "drift-growth";
pub const DIFFUSION_GROWTH: &str = "diffusion-growth";
pub const TERMINAL_GROWTH: &str = "terminal-growth";
pub const RUNNING_LOWER: &str = "running-lower";
pub const RUNNING_UPPER: &str = "running-upper";

fn frobenius(m: &[f64]) -> f64 {
    norm(m)
}

/// Evaluates the Lipschitz and growth bounds on `b, σ` and the two-sided
/// bounds on `f, g` at every sample, with the model's declared constants.
///
/// The Lipschitz check uses one-sided difference quotients along each axis,
/// so it reports `|Δb| + |Δσ|` per unit step minus `c₁`.
pub fn validate_growth(model: &MfgModel, samples: &[GrowthSample]) -> ValidationReport {
    let k = model.constants();
    let names = [
        LIPSCHITZ,
        DRIFT_GROWTH,
        DIFFUSION_GROWTH,
        TERMINAL_GROWTH,
        RUNNING_LOWER,
        RUNNING_UPPER,
    ];
    let mut checks: Vec<InequalityCheck> = names
        .iter()
        .map(|&name| InequalityCheck {
            name,
            worst_slack: f64::NEG_INFINITY,
            worst_sample: None,
            passed: true,
        })
        .collect();
    let mut record = |slot: usize, slack: f64, sample: usize| {
        let c = &mut checks[slot];
        // NaN slack is treated as the worst possible violation.
        let slack = if slack.is_nan() { f64::INFINITY } else { slack };
        if slack > c.worst_slack {
            c.worst_slack = slack;
            c.worst_sample = Some(sample);
        }
    };
    let d = model.dimension();
    for (s, sample) in samples.iter().enumerate() {
        let mu_p = moment(&sample.mu, k.p);
        let mu_norm = mu_p.powf(1.0 / k.p);
        let xn = norm(&sample.x);
        let an = norm(&sample.a);
        let b = model.drift(sample.t, &sample.x, &sample.mu, &sample.a);
        let sigma = model.volatility(sample.t, &sample.x, &sample.mu, &sample.a);
        let diff = model.diffusion(sample.t, &sample.x, &sample.mu, &sample.a);
        let f = model.running_reward(sample.t, &sample.x, &sample.mu, &sample.a);
        let g = model.terminal_reward(&sample.x, &sample.mu);

        let mut worst_quotient = f64::NEG_INFINITY;
        for axis in 0..d {
            let step = 1e-4 * (1.0 + sample.x[axis].abs());
            let mut y = sample.x.clone();
            y[axis] += step;
            let by = model.drift(sample.t, &y, &sample.mu, &sample.a);
            let sy = model.volatility(sample.t, &y, &sample.mu, &sample.a);
            let dist = euclid(&sample.x, &y);
            let lhs = euclid(&b, &by) + euclid(&sigma, &sy);
            worst_quotient = worst_quotient.max(lhs / dist - k.c1);
        }
        record(0, worst_quotient, s);
        record(1, norm(&b) - k.c1 * (1.0 + xn + mu_norm + an), s);
        let ps = k.p_sigma;
        let rhs = k.c1 * (1.0 + xn.powf(ps) + mu_p.powf(ps / k.p) + an.powf(ps));
        record(2, frobenius(&diff) - rhs, s);
        let base = k.c2 * (1.0 + xn.powf(k.p) + mu_p);
        record(3, g.abs() - base, s);
        record(4, -k.c2 * (1.0 + xn.powf(k.p) + mu_p + an.powf(k.p_prime)) - f, s);
        record(5, f - (base - k.c3 * an.powf(k.p_prime)), s);
    }
    for c in &mut checks {
        c.passed = c.worst_slack <= SLACK_TOLERANCE;
    }
    let mut notes = Vec::new();
    if samples.is_empty() {
        notes.push("empty sample cloud: nothing was checked".into());
    }
    if !k.p_prime_exceeds_p() {
        notes.push(format!(
            "the assumption p' > p is violated (p' = {}, p = {})",
            k.p_prime, k.p
        ));
    }
    ValidationReport { checks, notes }
}

/// How closely an atom must reproduce a convex combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvexityTolerance {
    /// `(b, σσᵀ)` within 1e-9 and `f` within 1e-9.
    Exact,
    /// Tolerances scaled to the resolution of the atom grid at the evaluation point.
    GridResolution,
    Explicit { matching: f64, reward: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityOptions {
    pub draws: usize,
    pub seed: u64,
    pub tolerance: ConvexityTolerance,
}

impl Default for ConvexityOptions {
    fn default() -> Self {
        Self {
            draws: 100,
            seed: 0,
            tolerance: ConvexityTolerance::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvexityVerdict {
    Pass,
    Fail,
    Inconclusive,
}

/// Result of testing one convex combination.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationCheck {
    /// The selected atom, if any atom met both tolerances.
    pub matched_atom: Option<usize>,
    /// Distance in `(b, σσᵀ)` from the combination to the nearest atom image.
    pub match_gap: f64,
    /// `f(a*) − Σ wⱼ f(aⱼ)` for the selected atom (NaN without a match).
    pub f_surplus: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityReport {
    pub verdict: ConvexityVerdict,
    pub draws: usize,
    pub failures: usize,
    pub worst_match_gap: f64,
    pub worst_f_surplus: f64,
    /// Weights of the first failing combination.
    pub first_failure: Option<Vec<f64>>,
    pub matching_tolerance: f64,
    pub reward_tolerance: f64,
}

/// The images `(b, σσᵀ)` and `f` of every atom at one `(t, x, μ)`.
struct AtomImages {
    images: Vec<Vec<f64>>,
    rewards: Vec<f64>,
}

impl AtomImages {
    fn new(model: &MfgModel, t: f64, x: &[f64], mu: &DiscreteMeasure) -> Self {
        let pop = Population::new(mu);
        let c = model.coefficients();
        let d = model.dimension();
        let mut images = Vec::with_capacity(model.controls().len());
        let mut rewards = Vec::with_capacity(model.controls().len());
        for a in model.controls().atoms() {
            let mut img = vec![0.0; d + d * d];
            c.drift(t, x, &pop, a, &mut img[..d]);
            c.diffusion(t, x, &pop, a, &mut img[d..]);
            images.push(img);
            rewards.push(c.running_reward(t, x, &pop, a));
        }
        Self { images, rewards }
    }

    fn finite(&self) -> bool {
        self.rewards.iter().all(|f| f.is_finite())
            && self.images.iter().flatten().all(|v| v.is_finite())
    }

    /// Distance in image space: Euclidean on `b` plus Frobenius on `σσᵀ`.
    fn distance(&self, d: usize, a: &[f64], b: &[f64]) -> f64 {
        euclid(&a[..d], &b[..d]) + euclid(&a[d..], &b[d..])
    }

    fn tolerances(&self, d: usize, control_dim: usize, mode: ConvexityTolerance) -> (f64, f64) {
        match mode {
            ConvexityTolerance::Exact => (1e-9, 1e-9),
            ConvexityTolerance::Explicit { matching, reward } => (matching, reward),
            ConvexityTolerance::GridResolution => {
                let n = self.images.len();
                let (mut spacing, mut f_step) = (0.0f64, 0.0f64);
                for j in 0..n {
                    let nearest = (0..n)
                        .filter(|&k| k != j)
                        .map(|k| (self.distance(d, &self.images[j], &self.images[k]), k))
                        .min_by(|a, b| a.0.total_cmp(&b.0));
                    if let Some((dist, k)) = nearest {
                        spacing = spacing.max(dist);
                        f_step = f_step.max((self.rewards[j] - self.rewards[k]).abs());
                    }
                }
                // A point of a product grid is within √dim/2 spacings of a node.
                let reach = (control_dim as f64).sqrt();
                (0.5 * reach * spacing + 1e-9, reach * f_step + 1e-9)
            }
        }
    }

    fn check(&self, d: usize, weights: &[f64], tol_match: f64, tol_f: f64) -> CombinationCheck {
        let width = self.images[0].len();
        let mut target = vec![0.0; width];
        let mut reward = 0.0;
        for (j, &w) in weights.iter().enumerate() {
            for (t, v) in target.iter_mut().zip(&self.images[j]) {
                *t += w * v;
            }
            reward += w * self.rewards[j];
        }
        let mut match_gap = f64::INFINITY;
        let mut best: Option<(usize, f64)> = None;
        for (j, img) in self.images.iter().enumerate() {
            let gap = self.distance(d, img, &target);
            match_gap = match_gap.min(gap);
            if gap <= tol_match && best.is_none_or(|(_, f)| self.rewards[j] > f) {
                best = Some((j, self.rewards[j]));
            }
        }
        match best {
            Some((j, f)) => CombinationCheck {
                matched_atom: Some(j),
                match_gap,
                f_surplus: f - reward,
                passed: f >= reward - tol_f,
            },
            None => CombinationCheck {
                matched_atom: None,
                match_gap,
                f_surplus: f64::NAN,
                passed: false,
            },
        }
    }
}

/// Tests one explicit convex combination `weights` of the control atoms.
pub fn check_combination(
    model: &MfgModel,
    t: f64,
    x: &[f64],
    mu: &DiscreteMeasure,
    weights: &[f64],
    tolerance: ConvexityTolerance,
) -> CombinationCheck {
    let images = AtomImages::new(model, t, x, mu);
    let d = model.dimension();
    let (tm, tf) = images.tolerances(d, model.controls().dimension(), tolerance);
    images.check(d, weights, tm, tf)
}

/// Probes convexity of `{(b, σσᵀ, z) : z ≤ f}` over the atoms at `(t, x, μ)`
/// with random Dirichlet combinations of two or three atoms.
pub fn check_convexity(
    model: &MfgModel,
    t: f64,
    x: &[f64],
    mu: &DiscreteMeasure,
    options: &ConvexityOptions,
) -> ConvexityReport {
    let images = AtomImages::new(model, t, x, mu);
    let d = model.dimension();
    let m = images.images.len();
    let (tm, tf) = images.tolerances(d, model.controls().dimension(), options.tolerance);
    let mut report = ConvexityReport {
        verdict: ConvexityVerdict::Pass,
        draws: 0,
        failures: 0,
        worst_match_gap: 0.0,
        worst_f_surplus: f64::INFINITY,
        first_failure: None,
        matching_tolerance: tm,
        reward_tolerance: tf,
    };
    if !images.finite() {
        report.verdict = ConvexityVerdict::Inconclusive;
        return report;
    }
    if m == 1 {
        // A single point is trivially convex.
        return report;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for _ in 0..options.draws {
        let size = rng.gen_range(2..=m.min(3));
        let chosen = rand::seq::index::sample(&mut rng, m, size);
        let mut weights = vec![0.0; m];
        let mut total = 0.0;
        for j in chosen.iter() {
            let e: f64 = rng.sample(Exp1);
            weights[j] = e;
            total += e;
        }
        weights.iter_mut().for_each(|w| *w /= total);
        let outcome = images.check(d, &weights, tm, tf);
        report.draws += 1;
        report.worst_match_gap = report.worst_match_gap.max(outcome.match_gap);
        if outcome.f_surplus.is_finite() {
            report.worst_f_surplus = report.worst_f_surplus.min(outcome.f_surplus);
        }
        if !outcome.passed {
            report.failures += 1;
            report.first_failure.get_or_insert(weights);
        }
    }
    report.verdict = if report.draws == 0 {
        ConvexityVerdict::Inconclusive
    } else if report.failures > 0 {
        ConvexityVerdict::Fail
    } else {
        ConvexityVerdict::Pass
    };
    report
}
