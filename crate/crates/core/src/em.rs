//! EM training where each missing segment is replaced by the paths found by
//! a depth-limited breadth-first search.

use std::collections::VecDeque;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{accumulate, grouped_policies, Diagnostics, GroupPolicy, LogLik, TrajectoryLogLik};
use crate::mdp::{Mdp, StateId};
use crate::optim::{maximize_scaled, OptimizerConfig};
use crate::trajectory::{MissingPair, Trajectory};

/// Hard cap on enumerated (or partial) paths per gap.
pub const PATH_LIMIT: usize = 100_000;
/// Outer-loop stopping threshold on `‖θ^{t+1} - θ^t‖∞`.
pub const THETA_TOL: f64 = 1e-5;

/// Every path from `u` to `v` with at most `depth` transitions, in
/// breadth-first order with successors ascending. States may repeat.
pub fn bfs_paths(mdp: &Mdp, u: StateId, v: StateId, depth: usize) -> Result<Vec<Vec<StateId>>> {
    mdp.check_state(u)?;
    mdp.check_state(v)?;
    if depth == 0 {
        return Err(Error::invalid("search depth must be at least 1"));
    }
    let support = mdp.support();
    let mut found = Vec::new();
    let mut queue: VecDeque<Vec<usize>> = VecDeque::from([vec![u.0]]);
    let mut generated = 1usize;
    while let Some(path) = queue.pop_front() {
        let last = *path.last().expect("paths are never empty");
        if path.len() > 1 && last == v.0 {
            found.push(path.iter().map(|&s| StateId(s)).collect());
            if found.len() > PATH_LIMIT {
                return Err(Error::TooManyPaths { u: u.0, v: v.0, limit: PATH_LIMIT });
            }
        }
        if path.len() > depth {
            continue;
        }
        for &next in support.row(last).0 {
            generated += 1;
            if generated > PATH_LIMIT * 10 {
                return Err(Error::TooManyPaths { u: u.0, v: v.0, limit: PATH_LIMIT });
            }
            let mut longer = Vec::with_capacity(path.len() + 1);
            longer.extend_from_slice(&path);
            longer.push(next);
            queue.push_back(longer);
        }
    }
    Ok(found)
}

/// Enumerated paths of one gap and their posterior weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPathSet {
    pub trajectory: usize,
    pub u: StateId,
    pub v: StateId,
    pub group: usize,
    pub paths: Vec<Vec<StateId>>,
    /// Empty when the gap is omitted from training.
    pub weights: Vec<f64>,
}

impl GapPathSet {
    pub fn pair(&self) -> MissingPair {
        MissingPair { u: self.u, v: self.v, group: self.group }
    }

    pub fn is_omitted(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Path sets for every gap of the dataset, weights not yet assigned.
pub fn enumerate_gaps(mdp: &Mdp, trajectories: &[Trajectory], depth: usize) -> Result<Vec<GapPathSet>> {
    let mut out = Vec::new();
    let mut dests: Vec<StateId> = trajectories.iter().map(|t| t.dest).collect();
    dests.sort_unstable();
    dests.dedup();
    for (i, t) in trajectories.iter().enumerate() {
        let group = dests.binary_search(&t.dest).expect("destination listed");
        for (u, v) in t.gaps() {
            let paths = bfs_paths(mdp, u, v, depth)?;
            out.push(GapPathSet { trajectory: i, u, v, group, paths, weights: Vec::new() });
        }
    }
    Ok(out)
}

/// `P(s'|s) = Σ_a P(a|s) p(s'|a,s)` and its gradient when available.
fn transition_prob(mdp: &Mdp, policy: &GroupPolicy, s: StateId, next: StateId, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    if !policy.is_defined(s) {
        return 0.0;
    }
    let kernel = mdp.kernel();
    let mut p = 0.0;
    for g in kernel.action_range(s) {
        let (succ, prob) = kernel.outcomes(g);
        if let Ok(k) = succ.binary_search(&next.0) {
            p += prob[k] * policy.prob(g);
            for (acc, d) in grad.iter_mut().zip(policy.grad(g)) {
                *acc += prob[k] * d;
            }
        }
    }
    p
}

/// `ln P(γ|θ)` of a state path and its gradient, or `None` when a step has
/// zero probability.
fn path_loglik(mdp: &Mdp, policy: &GroupPolicy, path: &[StateId]) -> Option<(f64, Vec<f64>)> {
    let tdim = mdp.n_features();
    let mut value = 0.0;
    let mut grad = vec![0.0; tdim];
    let mut dp = vec![0.0; tdim];
    for w in path.windows(2) {
        let p = transition_prob(mdp, policy, w[0], w[1], &mut dp);
        if !(p > 0.0) {
            return None;
        }
        value += p.ln();
        for (g, d) in grad.iter_mut().zip(&dp) {
            *g += d / p;
        }
    }
    Some((value, grad))
}

/// Posterior weights of every enumerated path under θ, normalized over the
/// enumerated set. Gaps without a path of positive probability are omitted.
pub fn e_step(mdp: &Mdp, trajectories: &[Trajectory], gapsets: &mut [GapPathSet], theta: &[f64]) -> Result<usize> {
    let gp = grouped_policies(mdp, theta, trajectories, false)?;
    let mut omitted = 0;
    for set in gapsets.iter_mut() {
        let policy = &gp.policies[set.group];
        let logs: Vec<Option<f64>> = set.paths.iter().map(|p| path_loglik(mdp, policy, p).map(|(v, _)| v)).collect();
        let best = logs.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if best == f64::NEG_INFINITY {
            set.weights.clear();
            omitted += 1;
            continue;
        }
        let raw: Vec<f64> = logs.iter().map(|l| l.map_or(0.0, |v| (v - best).exp())).collect();
        let total: f64 = raw.iter().sum();
        set.weights = raw.into_iter().map(|w| w / total).collect();
    }
    if omitted > 0 {
        info!("{omitted} gaps have no enumerated path and are omitted");
    }
    Ok(omitted)
}

/// The M-step objective: observed steps plus, for every kept gap,
/// `Σ_h w_h ln P(γ_h|θ)`.
pub fn m_step_objective(mdp: &Mdp, trajectories: &[Trajectory], gapsets: &[GapPathSet], theta: &[f64]) -> Result<LogLik> {
    let tdim = mdp.n_features();
    let gp = grouped_policies(mdp, theta, trajectories, true)?;
    let mut terms: Vec<TrajectoryLogLik> = trajectories
        .iter()
        .zip(&gp.grouping.assignment)
        .map(|(t, &g)| {
            let mut acc = TrajectoryLogLik::new(tdim);
            gp.policies[g].score_steps(mdp, t.steps(), &mut acc);
            acc
        })
        .collect();
    for set in gapsets.iter().filter(|s| !s.is_omitted()) {
        let policy = &gp.policies[set.group];
        let term = &mut terms[set.trajectory];
        for (path, &w) in set.paths.iter().zip(&set.weights) {
            if w == 0.0 {
                continue;
            }
            match path_loglik(mdp, policy, path) {
                Some((v, g)) => {
                    if term.is_feasible() {
                        term.value += w * v;
                        for (acc, d) in term.grad.iter_mut().zip(&g) {
                            *acc += w * d;
                        }
                    }
                }
                None => term.fail(format!("path from {} to {} lost all probability", set.u, set.v)),
            }
        }
    }
    Ok(accumulate(tdim, terms, Diagnostics { underflow_states: gp.underflow, ..Default::default() }))
}

/// Maximizes the M-step objective for fixed weights.
pub fn m_step(
    mdp: &Mdp,
    trajectories: &[Trajectory],
    gapsets: &[GapPathSet],
    theta: &[f64],
    config: &OptimizerConfig,
) -> Result<crate::optim::OptimResult> {
    let objective = |t: &[f64]| m_step_objective(mdp, trajectories, gapsets, t);
    maximize_scaled(&objective, theta, config, &mdp.feature_scale())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    /// M-step objective at the start and end of the M-step.
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub omitted_gaps: usize,
    pub inner_iterations: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmResult {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub trace: Vec<EmIteration>,
    pub evaluations: usize,
    pub eval_seconds: f64,
    pub factorization_seconds: f64,
    pub warning: Option<String>,
}

/// Alternates E- and M-steps until `‖Δθ‖∞ < 1e-5` or `outer_iters` rounds.
pub fn em_train(
    mdp: &Mdp,
    trajectories: &[Trajectory],
    depth: usize,
    outer_iters: usize,
    theta0: &[f64],
    config: &OptimizerConfig,
) -> Result<EmResult> {
    if outer_iters == 0 {
        return Err(Error::invalid("EM needs at least one outer iteration"));
    }
    mdp.check_theta(theta0)?;
    let mut gapsets = enumerate_gaps(mdp, trajectories, depth)?;
    let mut theta = theta0.to_vec();
    let mut trace = Vec::new();
    let mut converged = false;
    let (mut evaluations, mut eval_seconds, mut factorization_seconds) = (0, 0.0, 0.0);
    let mut warning = None;
    for iteration in 1..=outer_iters {
        let omitted = e_step(mdp, trajectories, &mut gapsets, &theta)?;
        let res = m_step(mdp, trajectories, &gapsets, &theta, config)?;
        evaluations += res.evaluations;
        eval_seconds += res.eval_time.as_secs_f64();
        factorization_seconds += res.factorization_time.as_secs_f64();
        if res.warning.is_some() {
            warning = res.warning.clone();
        }
        let change = res.theta.iter().zip(&theta).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        trace.push(EmIteration {
            iteration,
            surrogate_before: res.trace[0].loglik,
            surrogate_after: res.loglik.value,
            omitted_gaps: omitted,
            inner_iterations: res.iterations,
            theta: res.theta.clone(),
        });
        theta = res.theta;
        // without kept gaps the weights never change, so one M-step is final
        let nothing_to_impute = gapsets.iter().all(|s| s.is_omitted());
        if change < THETA_TOL || nothing_to_impute {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("EM stopped after {outer_iters} outer iterations without converging");
    }
    Ok(EmResult { theta, converged, trace, evaluations, eval_seconds, factorization_seconds, warning })
}
