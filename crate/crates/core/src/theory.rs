//! Exact tabular checks of the return bound, the performance-difference bound
//! and its sample-complexity corollary, plus the two supporting lemmas.
//!
//! Returns use the normalized convention `J = sum_{s,a} d(s,a) R(s,a)` with
//! `d = (1 - gamma) sum_t gamma^t d_t`, so `|J| <= R_max`. Representation
//! distances are L1 between distribution vectors over a finite alphabet.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::Exp1;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::l1_distance;
use crate::envlab::TabularMdp;
use crate::error::{check_dim, Error, Result};
use crate::nn::softmax;
use crate::par::{self, Execution};
use crate::rng::{self, Rng};

/// Margins below this count as violations.
pub const VIOLATION_TOL: f64 = 1e-9;
/// Tolerance for a distribution vector summing to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Discounted state-action distribution `d[s][a]`, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub d: Vec<f64>,
}

impl OccupancyTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.d[s * self.n_actions + a]
    }

    pub fn state_marginal(&self) -> Vec<f64> {
        self.d.chunks(self.n_actions).map(|row| row.iter().sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.d.iter().sum()
    }
}

fn check_policy(mdp: &TabularMdp, policy: &[f64]) -> Result<()> {
    check_dim("policy table", mdp.n_states * mdp.n_actions, policy.len())?;
    for (s, row) in policy.chunks(mdp.n_actions).enumerate() {
        if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("policy row {s} is not a distribution")));
        }
    }
    Ok(())
}

/// `P_pi[s][s'] = sum_a pi(a|s) P(s'|s,a)`.
fn policy_transition(mdp: &TabularMdp, policy: &[f64]) -> DMatrix<f64> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    DMatrix::from_fn(ns, ns, |s, next| (0..na).map(|a| policy[s * na + a] * mdp.p(s, a, next)).sum())
}

fn solve(system: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Infeasible("singular occupancy system".into()))
}

/// Solves `(I - gamma P_pi^T) d_s = (1 - gamma) rho0` and spreads `d_s` over
/// actions with `pi`.
pub fn discounted_occupancy(mdp: &TabularMdp, policy: &[f64]) -> Result<OccupancyTable> {
    check_policy(mdp, policy)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let p = policy_transition(mdp, policy);
    let system = DMatrix::identity(ns, ns) - p.transpose() * mdp.gamma;
    let rhs = DVector::from_iterator(ns, mdp.initial.iter().map(|x| (1.0 - mdp.gamma) * x));
    let ds = solve(system, rhs)?;
    let d = (0..ns * na).map(|i| ds[i / na] * policy[i]).collect();
    Ok(OccupancyTable { n_states: ns, n_actions: na, d })
}

/// Normalized return `sum d_pi(s,a) R(s,a)`.
pub fn exact_return(mdp: &TabularMdp, policy: &[f64]) -> Result<f64> {
    let occ = discounted_occupancy(mdp, policy)?;
    Ok(occ.d.iter().zip(&mdp.reward).map(|(d, r)| d * r).sum())
}

/// Unnormalized state values `V = (I - gamma P_pi)^-1 r_pi`.
pub fn state_values(mdp: &TabularMdp, policy: &[f64]) -> Result<Vec<f64>> {
    check_policy(mdp, policy)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let system = DMatrix::identity(ns, ns) - policy_transition(mdp, policy) * mdp.gamma;
    let rhs = DVector::from_fn(ns, |s, _| (0..na).map(|a| policy[s * na + a] * mdp.r(s, a)).sum());
    Ok(solve(system, rhs)?.iter().copied().collect())
}

/// `Q(s,a) = R(s,a) + gamma sum_s' P(s'|s,a) V(s')`, flattened.
pub fn q_values(mdp: &TabularMdp, policy: &[f64]) -> Result<Vec<f64>> {
    let v = state_values(mdp, policy)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    Ok((0..ns * na)
        .map(|i| {
            let (s, a) = (i / na, i % na);
            mdp.r(s, a) + mdp.gamma * mdp.p_row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum::<f64>()
        })
        .collect())
}

/// Unnormalized value of the initial distribution.
pub fn initial_value(mdp: &TabularMdp, policy: &[f64]) -> Result<f64> {
    let v = state_values(mdp, policy)?;
    Ok(mdp.initial.iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// Softmax policy `pi(.|s, z) = softmax(B[s] + W[s] z)` over a distribution
/// vector `z` on a finite latent alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzPolicyFamily {
    pub n_states: usize,
    pub n_actions: usize,
    pub latent_dim: usize,
    /// `B[s][a]`, flattened.
    pub bias: Vec<f64>,
    /// `W[s][a][k]`, flattened.
    pub weights: Vec<f64>,
    pub lipschitz_bound: f64,
}

impl LipschitzPolicyFamily {
    /// Computes the certificate
    /// `L = max_s max_{a,b} (max_k c_k - min_k c_k) / 4` with
    /// `c_k = W[s,a,k] - W[s,b,k]`.
    ///
    /// Along a segment `z(t)` the logit change `v` is fixed and, because
    /// `dz` sums to zero, `max v - min v <= max_{a,b} spread(c) |dz|_1 / 2`;
    /// the softmax Jacobian maps `v` to a vector of L1 norm at most
    /// `(max v - min v) / 2`.
    pub fn new(n_states: usize, n_actions: usize, latent_dim: usize, bias: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        check_dim("policy bias", n_states * n_actions, bias.len())?;
        check_dim("policy weights", n_states * n_actions * latent_dim, weights.len())?;
        if latent_dim == 0 || n_actions == 0 {
            return Err(Error::EmptyInput("policy family"));
        }
        if bias.iter().chain(&weights).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("policy family"));
        }
        let w = |s: usize, a: usize, k: usize| weights[(s * n_actions + a) * latent_dim + k];
        let mut bound = 0.0_f64;
        for s in 0..n_states {
            for a in 0..n_actions {
                for b in 0..a {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for k in 0..latent_dim {
                        let c = w(s, a, k) - w(s, b, k);
                        lo = lo.min(c);
                        hi = hi.max(c);
                    }
                    bound = bound.max((hi - lo) / 4.0);
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            latent_dim,
            bias,
            weights,
            lipschitz_bound: bound,
        })
    }

    /// Biases and weights drawn uniformly from `[-bias_scale, bias_scale]` and
    /// `[-weight_scale, weight_scale]`.
    pub fn random(n_states: usize, n_actions: usize, latent_dim: usize, bias_scale: f64, weight_scale: f64, rng: &mut Rng) -> Self {
        let bias = (0..n_states * n_actions).map(|_| bias_scale * rng.random_range(-1.0..=1.0)).collect();
        let weights = (0..n_states * n_actions * latent_dim)
            .map(|_| weight_scale * rng.random_range(-1.0..=1.0))
            .collect();
        Self::new(n_states, n_actions, latent_dim, bias, weights).expect("finite random family")
    }

    pub fn action_probs(&self, s: usize, z: &[f64]) -> Vec<f64> {
        let k = self.latent_dim;
        let logits: Vec<f64> = (0..self.n_actions)
            .map(|a| {
                let row = &self.weights[(s * self.n_actions + a) * k..][..k];
                self.bias[s * self.n_actions + a] + row.iter().zip(z).map(|(w, z)| w * z).sum::<f64>()
            })
            .collect();
        softmax(&logits)
    }

    /// Full policy table `pi[s][a]` for a fixed representation.
    pub fn policy(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n_states).flat_map(|s| self.action_probs(s, z)).collect()
    }

    /// Enumerates every `(s, z1, z2)` and checks
    /// `|pi(.|s,z1) - pi(.|s,z2)|_1 <= L |z1 - z2|_1`.
    pub fn verify_certificate(&self, latent_space: &[Vec<f64>]) -> Result<()> {
        for (i, z1) in latent_space.iter().enumerate() {
            check_dim("latent vector", self.latent_dim, z1.len())?;
            for z2 in &latent_space[..i] {
                let budget = self.lipschitz_bound * l1_distance(z1, z2) + VIOLATION_TOL;
                for s in 0..self.n_states {
                    let gap = l1_distance(&self.action_probs(s, z1), &self.action_probs(s, z2));
                    if gap > budget {
                        return Err(Error::Infeasible(format!(
                            "Lipschitz certificate {} fails at state {s}: {gap} > {budget}",
                            self.lipschitz_bound
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_simplex(name: &str, z: &[f64]) -> Result<()> {
    if z.is_empty() || z.iter().any(|&p| !(p >= 0.0)) || (z.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{name} is not a distribution vector")));
    }
    Ok(())
}

/// Per-context representation distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRepresentation {
    pub z_star: Vec<f64>,
    pub z_mutual: Vec<f64>,
    pub z_1: Vec<f64>,
    pub z_2: Vec<f64>,
}

impl ReferenceRepresentation {
    pub fn validate(&self) -> Result<()> {
        let k = self.z_mutual.len();
        for (name, z) in [("z_star", &self.z_star), ("z_mutual", &self.z_mutual), ("z_1", &self.z_1), ("z_2", &self.z_2)] {
            check_dim(name, k, z.len())?;
            check_simplex(name, z)?;
        }
        for (name, z) in [("z_1", &self.z_1), ("z_2", &self.z_2)] {
            if self.z_mutual.iter().zip(z).any(|(&m, &p)| m > 0.0 && p == 0.0) {
                return Err(Error::invalid(format!("support of {name} does not cover z_mutual")));
            }
        }
        Ok(())
    }

    fn vectors(&self) -> [&Vec<f64>; 4] {
        [&self.z_star, &self.z_mutual, &self.z_1, &self.z_2]
    }
}

/// One task `m`: its MDP and weighted contexts `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub mdp: TabularMdp,
    pub weight: f64,
    pub contexts: Vec<(f64, ReferenceRepresentation)>,
}

/// Tasks sharing state/action spaces and discount.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDistribution {
    pub tasks: Vec<TaskInstance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Star,
    Mutual,
    First,
    Second,
}

impl ReferenceRepresentation {
    pub fn pick(&self, which: Which) -> &[f64] {
        match which {
            Which::Star => &self.z_star,
            Which::Mutual => &self.z_mutual,
            Which::First => &self.z_1,
            Which::Second => &self.z_2,
        }
    }
}

impl TaskDistribution {
    pub fn validate(&self) -> Result<()> {
        let first = self.tasks.first().ok_or(Error::EmptyInput("task distribution"))?;
        let total: f64 = self.tasks.iter().map(|t| t.weight).sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid("task weights do not sum to 1"));
        }
        for t in &self.tasks {
            t.mdp.validate()?;
            if (t.mdp.n_states, t.mdp.n_actions) != (first.mdp.n_states, first.mdp.n_actions) || t.mdp.gamma != first.mdp.gamma {
                return Err(Error::invalid("tasks disagree on spaces or discount"));
            }
            if t.contexts.is_empty() || (t.contexts.iter().map(|c| c.0).sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid("context weights do not sum to 1"));
            }
            for (_, rep) in &t.contexts {
                rep.validate()?;
            }
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.tasks[0].mdp.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.tasks.iter().map(|t| t.mdp.r_max()).fold(0.0, f64::max)
    }

    pub fn kappa(&self) -> f64 {
        let g = self.gamma();
        2.0 * self.r_max() / ((1.0 - g) * (1.0 - g))
    }

    /// `E_{m,x}[f(rep)]`.
    pub fn expect(&self, mut f: impl FnMut(&TaskInstance, &ReferenceRepresentation) -> Result<f64>) -> Result<f64> {
        let mut total = 0.0;
        for t in &self.tasks {
            for (w, rep) in &t.contexts {
                total += t.weight * w * f(t, rep)?;
            }
        }
        Ok(total)
    }

    /// `E_{m,x}[J_m(pi_theta(. | ., Z(.|x)))]` for the chosen representation.
    pub fn expected_return(&self, family: &LipschitzPolicyFamily, which: Which) -> Result<f64> {
        self.expect(|t, rep| exact_return(&t.mdp, &family.policy(rep.pick(which))))
    }

    /// `E_{m,x}|Z_a - Z_b|_1`.
    pub fn expected_distance(&self, a: Which, b: Which) -> f64 {
        self.expect(|_, rep| Ok(l1_distance(rep.pick(a), rep.pick(b)))).expect("infallible")
    }

    /// Every distribution vector in the configuration plus the simplex
    /// vertices.
    pub fn latent_space(&self) -> Vec<Vec<f64>> {
        let k = self.tasks[0].contexts[0].1.z_mutual.len();
        let mut out: Vec<Vec<f64>> = (0..k).map(|i| crate::envlab::one_hot(i, k)).collect();
        for t in &self.tasks {
            for (_, rep) in &t.contexts {
                out.extend(rep.vectors().into_iter().cloned());
            }
        }
        out
    }
}

/// Count of configs, violations and margin statistics for one sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub name: String,
    pub config_digest: String,
    pub n_configs: usize,
    pub n_violations: usize,
    pub min_margin: f64,
    pub runtime_secs: f64,
    pub histogram: Vec<HistogramBucket>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monotonicity: Option<MonotonicityTally>,
    pub passed: bool,
    #[serde(skip)]
    pub margins: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBucket {
    pub upper_edge: f64,
    pub count: usize,
}

/// Among configs where the monotonicity condition holds, how many improved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MonotonicityTally {
    pub condition_holds: usize,
    pub improved_when_condition_holds: usize,
}

/// Upper edges of the margin buckets; the last bucket is open.
pub const MARGIN_EDGES: [f64; 7] = [-VIOLATION_TOL, 1e-6, 1e-3, 1e-2, 1e-1, 1.0, 10.0];

pub fn margin_histogram(margins: &[f64]) -> Vec<HistogramBucket> {
    let mut counts = vec![0usize; MARGIN_EDGES.len() + 1];
    for &m in margins {
        let idx = MARGIN_EDGES.iter().position(|&e| m < e).unwrap_or(MARGIN_EDGES.len());
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBucket {
            upper_edge: MARGIN_EDGES.get(i).copied().unwrap_or(f64::INFINITY),
            count,
        })
        .collect()
}

/// Hex SHA-256 of a canonical config string.
pub fn config_digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl BoundReport {
    fn from_margins(name: &str, digest_text: &str, margins: Vec<f64>, started: Instant, monotonicity: Option<MonotonicityTally>) -> Self {
        let n_violations = margins.iter().filter(|&&m| m < -VIOLATION_TOL).count();
        let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
        let mono_ok = monotonicity.is_none_or(|t| t.condition_holds == t.improved_when_condition_holds);
        Self {
            name: name.to_string(),
            config_digest: config_digest(digest_text),
            n_configs: margins.len(),
            n_violations,
            min_margin,
            runtime_secs: started.elapsed().as_secs_f64(),
            histogram: margin_histogram(&margins),
            monotonicity,
            passed: n_violations == 0 && mono_ok,
            margins,
        }
    }
}

fn dirichlet_ones(k: usize, rng: &mut Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1) + 1e-12).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

/// `(1 - lambda) z + lambda u` with `u` a fresh flat-Dirichlet draw.
fn perturb(z: &[f64], lambda: f64, rng: &mut Rng) -> Vec<f64> {
    let u = dirichlet_ones(z.len(), rng);
    z.iter().zip(&u).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect()
}

/// Random MDP with flat-Dirichlet rows and rewards in `[-1, 1]`.
pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, rng: &mut Rng) -> TabularMdp {
    let transition = (0..n_states * n_actions).flat_map(|_| dirichlet_ones(n_states, rng)).collect();
    let reward = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let initial = dirichlet_ones(n_states, rng);
    let mut mdp = TabularMdp {
        n_states,
        n_actions,
        transition,
        reward,
        initial,
        gamma,
    };
    renormalize(&mut mdp);
    mdp
}

// Dirichlet rows are normalized by a single division; fold the rounding
// residue into the largest entry so rows pass the 1e-12 check.
fn renormalize_rows(values: &mut [f64], width: usize) {
    for row in values.chunks_mut(width) {
        let residue = 1.0 - row.iter().sum::<f64>();
        let big = crate::envlab::argmax(row);
        row[big] += residue;
    }
}

fn renormalize(mdp: &mut TabularMdp) {
    renormalize_rows(&mut mdp.transition, mdp.n_states);
    renormalize_rows(&mut mdp.initial, mdp.n_states);
}

/// Scale parameters of a random configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepScales {
    pub gamma: (f64, f64),
    pub bias_scale: f64,
    pub weight_scale: f64,
    /// Mixing weight range used to move `z_1`, `z_2`, `z_star` off `z_mutual`.
    pub shift: f64,
}

pub const WIDE: SweepScales = SweepScales {
    gamma: (0.5, 0.95),
    bias_scale: 2.0,
    weight_scale: 2.0,
    shift: 0.5,
};

/// Short horizons, small weights and tiny shifts: the regime in which the
/// monotonicity condition can hold.
pub const NEAR: SweepScales = SweepScales {
    gamma: (0.0, 0.3),
    bias_scale: 2.0,
    weight_scale: 0.2,
    shift: 0.02,
};

pub const LATENT_DIM: usize = 3;
pub const MAX_STATES: usize = 6;
pub const MAX_ACTIONS: usize = 3;
pub const MAX_TASKS: usize = 4;
pub const MAX_CONTEXTS: usize = 3;

/// Random tasks and representations with the given scales.
pub fn random_task_distribution(scales: SweepScales, rng: &mut Rng) -> (TaskDistribution, usize, usize) {
    let ns = rng.random_range(2..=MAX_STATES);
    let na = rng.random_range(2..=MAX_ACTIONS);
    let gamma = rng.random_range(scales.gamma.0..=scales.gamma.1);
    let n_tasks = rng.random_range(1..=MAX_TASKS);
    let task_w = dirichlet_ones(n_tasks, rng);
    let tasks = task_w
        .iter()
        .map(|&weight| {
            let n_ctx = rng.random_range(1..=MAX_CONTEXTS);
            let ctx_w = dirichlet_ones(n_ctx, rng);
            let contexts = ctx_w
                .iter()
                .map(|&w| {
                    let z_mutual = dirichlet_ones(LATENT_DIM, rng);
                    let draw = |rng: &mut Rng| {
                        let lambda = scales.shift * rng.random::<f64>();
                        perturb(&z_mutual, lambda, rng)
                    };
                    let z_star = draw(rng);
                    let z_1 = draw(rng);
                    let z_2 = draw(rng);
                    (w, ReferenceRepresentation { z_star, z_mutual: z_mutual.clone(), z_1, z_2 })
                })
                .collect();
            TaskInstance {
                mdp: random_mdp(ns, na, gamma, rng),
                weight,
                contexts,
            }
        })
        .collect();
    let mut dist = TaskDistribution { tasks };
    normalize_weights(&mut dist);
    (dist, ns, na)
}

fn normalize_weights(dist: &mut TaskDistribution) {
    let total: f64 = dist.tasks.iter().map(|t| t.weight).sum();
    dist.tasks.iter_mut().for_each(|t| t.weight /= total);
}

/// LHS `|J*(theta) - J(theta)|` (with `Z = z_1`) and RHS
/// `kappa L_z E[|Z - Z_mutual|_1 + |Z_mutual - Z*|_1]`.
pub fn return_bound_sides(dist: &TaskDistribution, family: &LipschitzPolicyFamily) -> Result<(f64, f64)> {
    let j_star = dist.expected_return(family, Which::Star)?;
    let j = dist.expected_return(family, Which::First)?;
    let lhs = (j_star - j).abs();
    let dist_sum = dist.expect(|_, rep| Ok(l1_distance(&rep.z_1, &rep.z_mutual) + l1_distance(&rep.z_mutual, &rep.z_star)))?;
    let rhs = dist.kappa() * family.lipschitz_bound * dist_sum;
    Ok((lhs, rhs))
}

/// Certificate check over the configuration's latent space, then both sides.
fn certified(dist: &TaskDistribution, families: &[&LipschitzPolicyFamily]) -> Result<()> {
    dist.validate()?;
    let space = dist.latent_space();
    families.iter().try_for_each(|f| f.verify_certificate(&space))
}

pub fn verify_return_bound(n_configs: usize, seed: u64, exec: Execution) -> Result<BoundReport> {
    let started = Instant::now();
    let margins = par::map_indexed(n_configs, exec, |i| -> Result<f64> {
        let mut rng = rng::stream(seed, i as u64);
        let scales = if i % 2 == 0 { WIDE } else { NEAR };
        let (dist, ns, na) = random_task_distribution(scales, &mut rng);
        let family = LipschitzPolicyFamily::random(ns, na, LATENT_DIM, scales.bias_scale, scales.weight_scale, &mut rng);
        certified(&dist, &[&family])?;
        let (lhs, rhs) = return_bound_sides(&dist, &family)?;
        Ok(rhs - lhs)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let digest = format!("return-bound n_configs={n_configs} seed={seed} latent={LATENT_DIM}");
    Ok(BoundReport::from_margins("return-bound", &digest, margins, started, None))
}

/// Exact quantities of one performance-difference configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfDiffSides {
    /// `J^2(theta_2) - J^1(theta_1)`.
    pub improvement: f64,
    /// `J^mutual(theta_2) - J^mutual(theta_1)`.
    pub eps_mutual: f64,
    /// `kappa L_z E[2|Z_2 - Z_mutual|_1 + |Z_2 - Z_1|_1]`.
    pub penalty: f64,
}

impl PerfDiffSides {
    pub fn lower_bound(&self) -> f64 {
        self.eps_mutual - self.penalty
    }

    pub fn margin(&self) -> f64 {
        self.improvement - self.lower_bound()
    }

    /// The strict monotonicity requirement, in expectation form.
    pub fn condition_holds(&self) -> bool {
        self.penalty < self.eps_mutual
    }
}

/// `L_z` is the larger of the two certificates.
pub fn perf_diff_sides(dist: &TaskDistribution, theta_1: &LipschitzPolicyFamily, theta_2: &LipschitzPolicyFamily) -> Result<PerfDiffSides> {
    let j2 = dist.expected_return(theta_2, Which::Second)?;
    let j1 = dist.expected_return(theta_1, Which::First)?;
    let jm2 = dist.expected_return(theta_2, Which::Mutual)?;
    let jm1 = dist.expected_return(theta_1, Which::Mutual)?;
    let lz = theta_1.lipschitz_bound.max(theta_2.lipschitz_bound);
    let shifts = dist.expect(|_, rep| Ok(2.0 * l1_distance(&rep.z_2, &rep.z_mutual) + l1_distance(&rep.z_2, &rep.z_1)))?;
    Ok(PerfDiffSides {
        improvement: j2 - j1,
        eps_mutual: jm2 - jm1,
        penalty: dist.kappa() * lz * shifts,
    })
}

/// Draws for `theta_2` until `eps_mutual > 0`.
const MAX_REJECTIONS: usize = 1000;

pub fn verify_perf_diff_bound(n_configs: usize, seed: u64, exec: Execution) -> Result<BoundReport> {
    let started = Instant::now();
    let results = par::map_indexed(n_configs, exec, |i| -> Result<PerfDiffSides> {
        let mut rng = rng::stream(seed, i as u64);
        let scales = if i % 2 == 0 { WIDE } else { NEAR };
        let (dist, ns, na) = random_task_distribution(scales, &mut rng);
        let theta_1 = LipschitzPolicyFamily::random(ns, na, LATENT_DIM, scales.bias_scale, scales.weight_scale, &mut rng);
        for _ in 0..MAX_REJECTIONS {
            let step = LipschitzPolicyFamily::random(ns, na, LATENT_DIM, scales.bias_scale, scales.weight_scale, &mut rng);
            let bias = theta_1.bias.iter().zip(&step.bias).map(|(a, b)| a + b).collect();
            let weights = theta_1.weights.iter().zip(&step.weights).map(|(a, b)| a + 0.5 * b).collect();
            let theta_2 = LipschitzPolicyFamily::new(ns, na, LATENT_DIM, bias, weights)?;
            let sides = perf_diff_sides(&dist, &theta_1, &theta_2)?;
            if sides.eps_mutual > 0.0 {
                certified(&dist, &[&theta_1, &theta_2])?;
                return Ok(sides);
            }
        }
        Err(Error::Infeasible(format!("config {i}: no improving theta_2 found")))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let tally = MonotonicityTally {
        condition_holds: results.iter().filter(|s| s.condition_holds()).count(),
        improved_when_condition_holds: results.iter().filter(|s| s.condition_holds() && s.improvement > 0.0).count(),
    };
    let margins = results.iter().map(PerfDiffSides::margin).collect();
    let digest = format!("perf-diff n_configs={n_configs} seed={seed} latent={LATENT_DIM}");
    Ok(BoundReport::from_margins("perf-diff", &digest, margins, started, Some(tally)))
}

/// Outcome of one cell of the L1-deviation Monte Carlo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeissmanResult {
    pub alphabet_size: usize,
    pub m: usize,
    pub eps: f64,
    pub n_trials: usize,
    pub empirical_rate: f64,
    pub analytic_bound: f64,
    /// Binomial standard error at the (clipped) bound.
    pub sigma: f64,
    pub passed: bool,
}

/// `(2^|A| - 2) exp(-m eps^2 / 2)`.
pub fn weissman_bound(alphabet_size: usize, m: usize, eps: f64) -> f64 {
    (2f64.powi(alphabet_size as i32) - 2.0) * (-(m as f64) * eps * eps / 2.0).exp()
}

const TRIALS_PER_CHUNK: usize = 256;
/// Deviations within this of `eps` count as reaching it.
const BOUNDARY_TOL: f64 = 1e-12;

fn sample_counts(cumulative: &[f64], m: usize, counts: &mut [usize], rng: &mut Rng) {
    counts.iter_mut().for_each(|c| *c = 0);
    for _ in 0..m {
        let u: f64 = rng.random();
        let idx = cumulative.partition_point(|&c| c <= u).min(counts.len() - 1);
        counts[idx] += 1;
    }
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

fn empirical_l1(p: &[f64], counts: &[usize], m: usize) -> f64 {
    p.iter().zip(counts).map(|(p, &c)| (c as f64 / m as f64 - p).abs()).sum()
}

/// Fraction of trials with `|P - P_hat_m|_1 >= eps`.
pub fn deviation_rate(p: &[f64], m: usize, eps: f64, n_trials: usize, seed: u64, exec: Execution) -> Result<f64> {
    check_simplex("sampling distribution", p)?;
    if m == 0 || n_trials == 0 {
        return Err(Error::invalid("m and n_trials must be >= 1"));
    }
    let cum = cumulative(p);
    let n_chunks = n_trials.div_ceil(TRIALS_PER_CHUNK);
    let hits: usize = par::map_indexed(n_chunks, exec, |c| {
        let mut rng = rng::stream(seed, c as u64);
        let trials = TRIALS_PER_CHUNK.min(n_trials - c * TRIALS_PER_CHUNK);
        let mut counts = vec![0usize; p.len()];
        (0..trials)
            .filter(|_| {
                sample_counts(&cum, m, &mut counts, &mut rng);
                empirical_l1(p, &counts, m) >= eps - BOUNDARY_TOL
            })
            .count()
    })
    .into_iter()
    .sum();
    Ok(hits as f64 / n_trials as f64)
}

/// Uniform `P` over `alphabet_size` symbols; passes when the empirical rate
/// is at most `bound + 3 sigma`.
pub fn verify_weissman(alphabet_size: usize, m: usize, eps: f64, n_trials: usize, seed: u64, exec: Execution) -> Result<WeissmanResult> {
    if alphabet_size < 2 {
        return Err(Error::invalid("alphabet_size must be >= 2"));
    }
    if !(eps >= 0.0) {
        return Err(Error::invalid("eps must be >= 0"));
    }
    let p = vec![1.0 / alphabet_size as f64; alphabet_size];
    let empirical_rate = deviation_rate(&p, m, eps, n_trials, seed, exec)?;
    let analytic_bound = weissman_bound(alphabet_size, m, eps);
    let q = analytic_bound.clamp(0.0, 1.0);
    let sigma = (q * (1.0 - q) / n_trials as f64).sqrt();
    Ok(WeissmanResult {
        alphabet_size,
        m,
        eps,
        n_trials,
        empirical_rate,
        analytic_bound,
        sigma,
        passed: empirical_rate <= analytic_bound + 3.0 * sigma,
    })
}

pub const WEISSMAN_ALPHABETS: [usize; 3] = [2, 4, 8];
pub const WEISSMAN_SAMPLES: [usize; 3] = [10, 100, 1000];
pub const WEISSMAN_EPS: [f64; 3] = [0.1, 0.3, 0.5];

/// The full `(|A|, m, eps)` grid; each cell gets its own derived seed.
pub fn weissman_grid(n_trials: usize, seed: u64, exec: Execution) -> Result<Vec<WeissmanResult>> {
    let mut out = Vec::new();
    for (ai, &a) in WEISSMAN_ALPHABETS.iter().enumerate() {
        for (mi, &m) in WEISSMAN_SAMPLES.iter().enumerate() {
            for (ei, &eps) in WEISSMAN_EPS.iter().enumerate() {
                let cell = (ai * 9 + mi * 3 + ei) as u64;
                out.push(verify_weissman(a, m, eps, n_trials, rng::derive(seed, cell), exec)?);
            }
        }
    }
    Ok(out)
}

/// Symbols of the sample-complexity formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorollaryConfig {
    pub r_max: f64,
    pub gamma: f64,
    pub lipschitz: f64,
    pub eps_mutual: f64,
    pub beta: f64,
    pub vol_z: u32,
    pub xi: f64,
    pub n_prior: u64,
}

impl CorollaryConfig {
    pub fn kappa(&self) -> f64 {
        2.0 * self.r_max / ((1.0 - self.gamma) * (1.0 - self.gamma))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_max > 0.0 && self.lipschitz > 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("need R_max > 0, L_z > 0, beta >= 0"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma outside [0, 1)"));
        }
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(Error::invalid("xi outside (0, 1)"));
        }
        if self.vol_z < 2 || self.vol_z > 62 {
            return Err(Error::invalid("vol_z must be in 2..=62"));
        }
        if self.eps_mutual <= self.kappa() * self.lipschitz * self.beta {
            return Err(Error::Infeasible(format!(
                "eps_mutual {} <= kappa L_z beta {}",
                self.eps_mutual,
                self.kappa() * self.lipschitz * self.beta
            )));
        }
        Ok(())
    }

    /// Per-sample L1 tolerance on the updated representation:
    /// `(1 - gamma)^2 eps / (4 R_max L_z) - beta / 2`.
    pub fn deviation_tolerance(&self) -> f64 {
        let g = 1.0 - self.gamma;
        g * g * self.eps_mutual / (4.0 * self.r_max * self.lipschitz) - self.beta / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorollaryK {
    pub k: f64,
    pub k_ceil: f64,
    /// `max(ceil(k), 0)`.
    pub extra_samples: u64,
}

/// `k = 8 kappa^2 L^2 / (eps - kappa L beta)^2 ln((2^vol - 2) / xi) - N`.
pub fn corollary_k(config: &CorollaryConfig) -> Result<CorollaryK> {
    config.validate()?;
    let kappa = config.kappa();
    let l = config.lipschitz;
    let gap = config.eps_mutual - kappa * l * config.beta;
    let log_term = ((2f64.powi(config.vol_z as i32) - 2.0) / config.xi).ln();
    let k = 8.0 * kappa * kappa * l * l / (gap * gap) * log_term - config.n_prior as f64;
    let k_ceil = k.ceil();
    Ok(CorollaryK {
        k,
        k_ceil,
        extra_samples: k_ceil.max(0.0) as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorollaryResult {
    pub n_samples: u64,
    pub tolerance: f64,
    pub n_trials: usize,
    pub success_rate: f64,
    pub target: f64,
    pub passed: bool,
}

/// Fraction of trials in which `n_samples` draws from `z_mutual` give an
/// empirical distribution within the deviation tolerance in L1.
pub fn corollary_success_rate(
    config: &CorollaryConfig,
    z_mutual: &[f64],
    n_samples: u64,
    n_trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<CorollaryResult> {
    config.validate()?;
    check_dim("z_mutual", config.vol_z as usize, z_mutual.len())?;
    check_simplex("z_mutual", z_mutual)?;
    let tolerance = config.deviation_tolerance();
    if tolerance <= 0.0 {
        return Err(Error::Infeasible(format!("deviation tolerance {tolerance} <= 0")));
    }
    if n_samples == 0 {
        return Err(Error::invalid("N + k must be >= 1"));
    }
    // success = deviation <= tol, i.e. not (deviation > tol)
    let cum = cumulative(z_mutual);
    let n_chunks = n_trials.div_ceil(TRIALS_PER_CHUNK);
    let m = n_samples as usize;
    let ok: usize = par::map_indexed(n_chunks, exec, |c| {
        let mut rng = rng::stream(seed, c as u64);
        let trials = TRIALS_PER_CHUNK.min(n_trials - c * TRIALS_PER_CHUNK);
        let mut counts = vec![0usize; z_mutual.len()];
        (0..trials)
            .filter(|_| {
                sample_counts(&cum, m, &mut counts, &mut rng);
                empirical_l1(z_mutual, &counts, m) <= tolerance
            })
            .count()
    })
    .into_iter()
    .sum();
    let success_rate = ok as f64 / n_trials.max(1) as f64;
    let target = 1.0 - config.xi;
    Ok(CorollaryResult {
        n_samples,
        tolerance,
        n_trials,
        success_rate,
        target,
        passed: success_rate >= target,
    })
}

/// Draws `N + max(ceil(k), 0)` samples per trial.
pub fn verify_corollary(config: &CorollaryConfig, z_mutual: &[f64], n_trials: usize, seed: u64, exec: Execution) -> Result<CorollaryResult> {
    let k = corollary_k(config)?;
    corollary_success_rate(config, z_mutual, config.n_prior + k.extra_samples, n_trials, seed, exec)
}

/// Both sides of the two-model return-gap lemma.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnGapSides {
    pub lhs: f64,
    pub rhs: f64,
    pub eps_pi: f64,
    pub eps_model: f64,
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * l1_distance(a, b)
}

/// `|V^{pi_2}_{M_2} - V^{pi_1}_{M_1}|` against
/// `2 R_max (eps_pi + gamma eps_M) / (1 - gamma)^2`, with
/// `eps_pi = max_s TV(pi_1, pi_2)` and `eps_M` the TV between transition rows
/// averaged under `d^{pi_1}_{M_1}`. The models must share rewards, start
/// distribution and discount.
pub fn return_gap_sides(m1: &TabularMdp, pi1: &[f64], m2: &TabularMdp, pi2: &[f64]) -> Result<ReturnGapSides> {
    if (m1.n_states, m1.n_actions, m1.gamma) != (m2.n_states, m2.n_actions, m2.gamma) || m1.reward != m2.reward || m1.initial != m2.initial {
        return Err(Error::invalid("models must differ only in transitions"));
    }
    let na = m1.n_actions;
    let lhs = (initial_value(m2, pi2)? - initial_value(m1, pi1)?).abs();
    let eps_pi = pi1.chunks(na).zip(pi2.chunks(na)).map(|(a, b)| tv(a, b)).fold(0.0, f64::max);
    let occ = discounted_occupancy(m1, pi1)?;
    let mut eps_model = 0.0;
    for s in 0..m1.n_states {
        for a in 0..na {
            eps_model += occ.get(s, a) * tv(m1.p_row(s, a), m2.p_row(s, a));
        }
    }
    let g = 1.0 - m1.gamma;
    let r_max = m1.r_max();
    let rhs = 2.0 * r_max * (eps_pi / (g * g) + m1.gamma * eps_model / (g * g));
    Ok(ReturnGapSides { lhs, rhs, eps_pi, eps_model })
}

fn random_policy(ns: usize, na: usize, rng: &mut Rng) -> Vec<f64> {
    (0..ns).flat_map(|_| dirichlet_ones(na, rng)).collect()
}

fn mix(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect()
}

pub fn lemma_a1_check(n_configs: usize, seed: u64, exec: Execution) -> Result<BoundReport> {
    let started = Instant::now();
    let margins = par::map_indexed(n_configs, exec, |i| -> Result<f64> {
        let mut rng = rng::stream(seed, i as u64);
        let ns = rng.random_range(2..=MAX_STATES);
        let na = rng.random_range(2..=MAX_ACTIONS);
        let gamma = rng.random_range(0.0..0.95);
        let m1 = random_mdp(ns, na, gamma, &mut rng);
        let other = random_mdp(ns, na, gamma, &mut rng);
        // lambda^2 concentrates mass near identical pairs
        let lm: f64 = rng.random::<f64>().powi(2);
        let lp: f64 = rng.random::<f64>().powi(2);
        let mut m2 = m1.clone();
        m2.transition = mix(&m1.transition, &other.transition, lm);
        renormalize_rows(&mut m2.transition, ns);
        let pi1 = random_policy(ns, na, &mut rng);
        let pi2 = mix(&pi1, &random_policy(ns, na, &mut rng), lp);
        let sides = return_gap_sides(&m1, &pi1, &m2, &pi2)?;
        Ok(sides.rhs - sides.lhs)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let digest = format!("lemma-a1 n_configs={n_configs} seed={seed}");
    Ok(BoundReport::from_margins("lemma-a1", &digest, margins, started, None))
}
