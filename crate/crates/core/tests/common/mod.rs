//! Brute-force references and random instances shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;

use irlc::datagen::{random_acyclic_mdp, rng_from_seed};
use irlc::likelihood::GroupPolicy;
use irlc::mdp::{FeatureKind, FeatureSpec, FeatureTensor, Mdp, StateId, TransitionKernel};

pub const N_FEATURES: usize = 2;

/// Acyclic instance with 5 to 12 states, some stochastic actions, two
/// features and a weight vector drawn from the same seed.
pub fn acyclic_instance(seed: u64) -> (Mdp, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    let n = rng.random_range(5..=12);
    let mdp = random_acyclic_mdp(n, N_FEATURES, 0.45, 0.3, &mut rng).unwrap();
    let theta = (0..N_FEATURES).map(|_| rng.random_range(-1.5..0.5)).collect();
    (mdp, theta)
}

/// Deterministic acyclic instance whose states form layers with edges only
/// between consecutive layers, so all paths between two states have the
/// same number of transitions.
pub fn layered_instance(seed: u64) -> Mdp {
    let mut rng = rng_from_seed(seed);
    let widths: Vec<usize> = (0..5).map(|i| if i == 0 { 1 } else { rng.random_range(2..=3) }).collect();
    let mut layers = Vec::new();
    let mut next = 0;
    for w in &widths {
        layers.push((next..next + w).collect::<Vec<usize>>());
        next += w;
    }
    let mut edges = Vec::new();
    for pair in layers.windows(2) {
        for &s in &pair[0] {
            let mut targets: Vec<usize> = pair[1].iter().copied().filter(|_| rng.random_bool(0.7)).collect();
            if targets.is_empty() {
                targets.push(pair[1][rng.random_range(0..pair[1].len())]);
            }
            edges.extend(targets.into_iter().map(|t| (s, t)));
        }
    }
    let rows: Vec<(usize, usize, Vec<f64>)> =
        edges.iter().map(|&(a, b)| (a, b, (0..N_FEATURES).map(|_| rng.random::<f64>()).collect())).collect();
    let specs = (0..N_FEATURES).map(|t| FeatureSpec { name: format!("f{t}"), kind: FeatureKind::Real }).collect();
    let kernel = TransitionKernel::deterministic(next, &edges).unwrap();
    Mdp::new(kernel, FeatureTensor::from_rows(next, specs, &rows).unwrap()).unwrap()
}

/// `Σ_a p(s'|a,s) exp(r(s'|s))` for every successor of `s`, from the kernel
/// and the reward function directly.
pub fn edge_weights(mdp: &Mdp, theta: &[f64], s: usize) -> BTreeMap<usize, f64> {
    let kernel = mdp.kernel();
    let mut out = BTreeMap::new();
    for g in kernel.action_range(StateId(s)) {
        let (succ, prob) = kernel.outcomes(g);
        for (&to, &p) in succ.iter().zip(prob) {
            let r = mdp.reward(StateId(s), StateId(to), theta).unwrap();
            *out.entry(to).or_insert(0.0) += p * r.exp();
        }
    }
    out
}

/// Successor states of `s` in the transition support.
pub fn successors(mdp: &Mdp, s: usize) -> Vec<usize> {
    let mut out: Vec<usize> = mdp
        .kernel()
        .action_range(StateId(s))
        .flat_map(|g| mdp.kernel().outcomes(g).0.to_vec())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Every state path from `from` that ends at its first visit to `to`,
/// assuming an acyclic support.
pub fn all_paths(mdp: &Mdp, from: usize, to: usize) -> Vec<Vec<usize>> {
    fn walk(mdp: &Mdp, path: &mut Vec<usize>, to: usize, out: &mut Vec<Vec<usize>>) {
        let last = *path.last().unwrap();
        if path.len() > 1 && last == to {
            out.push(path.clone());
            return;
        }
        for next in successors(mdp, last) {
            path.push(next);
            walk(mdp, path, to, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    walk(mdp, &mut vec![from], to, &mut out);
    out
}

/// `z_s` as the sum over all paths from `s` into `dest` of the product of
/// exponentiated rewards.
pub fn path_sum_z(mdp: &Mdp, theta: &[f64], dest: usize) -> Vec<f64> {
    let weights: Vec<BTreeMap<usize, f64>> = (0..mdp.n_states()).map(|s| edge_weights(mdp, theta, s)).collect();
    (0..mdp.n_states())
        .map(|s| {
            if s == dest {
                return 1.0;
            }
            all_paths(mdp, s, dest)
                .iter()
                .map(|p| p.windows(2).map(|w| weights[w[0]][&w[1]]).product::<f64>())
                .sum()
        })
        .collect()
}

/// `Σ_a P(a|s) p(s'|a,s)` under a group policy.
pub fn policy_step(mdp: &Mdp, policy: &GroupPolicy, s: usize, to: usize) -> f64 {
    let kernel = mdp.kernel();
    kernel
        .action_range(StateId(s))
        .map(|g| {
            let (succ, prob) = kernel.outcomes(g);
            let p: f64 = succ.iter().zip(prob).filter(|(&x, _)| x == to).map(|(_, &p)| p).sum();
            policy.prob(g) * p
        })
        .sum()
}

/// Probability of a state path under a group policy.
pub fn path_probability(mdp: &Mdp, policy: &GroupPolicy, path: &[usize]) -> f64 {
    path.windows(2).map(|w| policy_step(mdp, policy, w[0], w[1])).product()
}

/// `P(v|u)` as the sum of path probabilities over every `u → v` path.
pub fn path_sum_reach(mdp: &Mdp, policy: &GroupPolicy, u: usize, v: usize) -> f64 {
    all_paths(mdp, u, v).iter().map(|p| path_probability(mdp, policy, p)).sum()
}

pub fn inf_norm(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Derivatives smaller than this in norm count as zero.
pub const NEGLIGIBLE: f64 = 1e-8;

/// Norm-wise relative error `‖a - b‖∞ / max(‖a‖∞, ‖b‖∞, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = inf_norm(a.iter().copied()).max(inf_norm(b.iter().copied())).max(NEGLIGIBLE);
    inf_norm(a.iter().zip(b).map(|(x, y)| x - y)) / scale
}

/// Central finite differences of a vector-valued function, one column per
/// coordinate, with step `1e-6 · (1 + |θ_t|)`.
pub fn central_differences(theta: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    (0..theta.len())
        .map(|t| {
            let h = 1e-6 * (1.0 + theta[t].abs());
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[t] += h;
            minus[t] -= h;
            f(&plus).iter().zip(f(&minus)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect()
}
