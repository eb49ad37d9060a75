//! Local action probabilities and the log-likelihood of observed steps.

use log::warn;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{solve_forward, value_iteration_forward, ForwardSolution};
use crate::mdp::{ActionId, DestinationSet, Mdp, StateId};
use crate::trajectory::{Grouping, ObservedStep, Trajectory};

/// Below this, `z_s` is considered to have underflowed.
pub const UNDERFLOW_Z: f64 = 1e-300;

/// Log-likelihood value and gradient over the feasible trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLik {
    pub value: f64,
    pub grad: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl LogLik {
    pub fn zero(n_features: usize) -> Self {
        LogLik { value: 0.0, grad: vec![0.0; n_features], diagnostics: Diagnostics::default() }
    }

    /// `value`, or `-inf` when any trajectory was infeasible.
    pub fn strict_value(&self) -> f64 {
        if self.diagnostics.infeasible.is_empty() {
            self.value
        } else {
            f64::NEG_INFINITY
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Trajectories with zero probability, left out of value and gradient.
    pub infeasible: Vec<Infeasible>,
    /// Reach probabilities pulled back into `[0, 1]` from round-off.
    pub clamped: usize,
    pub max_clamp: f64,
    /// States with `0 < z_s < 1e-300`.
    pub underflow_states: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infeasible {
    pub trajectory: usize,
    pub reason: String,
}

/// Log-likelihood of one trajectory; `value` is `-inf` with a `reason` when
/// some factor has zero probability.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLogLik {
    pub value: f64,
    pub grad: Vec<f64>,
    pub reason: Option<String>,
}

impl TrajectoryLogLik {
    pub(crate) fn new(n_features: usize) -> Self {
        TrajectoryLogLik { value: 0.0, grad: vec![0.0; n_features], reason: None }
    }

    pub(crate) fn fail(&mut self, reason: String) {
        if self.reason.is_none() {
            self.value = f64::NEG_INFINITY;
            self.reason = Some(reason);
        }
    }

    /// Adds `ln p` and `dp / p`.
    pub(crate) fn add_log(&mut self, p: f64, dp: &[f64]) {
        if self.reason.is_some() {
            return;
        }
        self.value += p.ln();
        for (g, d) in self.grad.iter_mut().zip(dp) {
            *g += d / p;
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.reason.is_none()
    }
}

/// Sums per-trajectory terms in index order, leaving infeasible ones out.
pub(crate) fn accumulate(n_features: usize, terms: Vec<TrajectoryLogLik>, mut diagnostics: Diagnostics) -> LogLik {
    let mut value = 0.0;
    let mut grad = vec![0.0; n_features];
    for (i, term) in terms.into_iter().enumerate() {
        match term.reason {
            Some(reason) => diagnostics.infeasible.push(Infeasible { trajectory: i, reason }),
            None => {
                value += term.value;
                for (g, d) in grad.iter_mut().zip(&term.grad) {
                    *g += d;
                }
            }
        }
    }
    if !diagnostics.infeasible.is_empty() {
        warn!("{} trajectories have zero probability and were left out", diagnostics.infeasible.len());
    }
    LogLik { value, grad, diagnostics }
}

fn check_action(mdp: &Mdp, s: StateId, a: ActionId) -> Result<usize> {
    mdp.check_state(s)?;
    mdp.kernel()
        .action_index(s, a)
        .ok_or_else(|| Error::invalid(format!("action {a} not available at state {s}")))
}

/// Numerator of `P(a|s)`, `Σ_{s'} p(s'|a,s) e^{r(s'|s)} z_{s'}`, and optionally
/// its θ-gradient `Σ_{s'} p e^r (f_t z_{s'} + ∂z_{s'}/∂θ_t)`.
fn numerator(mdp: &Mdp, exp_r: &[f64], g: usize, z: &[f64], dz: Option<&[Vec<f64>]>, dnum: &mut [f64]) -> f64 {
    let kernel = mdp.kernel();
    let (succ, prob) = kernel.outcomes(g);
    let mut num = 0.0;
    dnum.iter_mut().for_each(|v| *v = 0.0);
    for ((&next, &p), e) in succ.iter().zip(prob).zip(kernel.entry_range(g)) {
        let pos = mdp.entry_position(e);
        let weight = p * exp_r[pos];
        let zn = z[next];
        num += weight * zn;
        if let Some(dz) = dz {
            for ((d, f), col) in dnum.iter_mut().zip(mdp.features_at(pos)).zip(dz) {
                *d += weight * (f * zn + col[next]);
            }
        }
    }
    num
}

/// `P(a|s) = Σ_{s'} p(s'|a,s) e^{r(s'|s,θ)} z_{s'} / z_s`.
pub fn action_prob(mdp: &Mdp, s: StateId, a: ActionId, z: &[f64], theta: &[f64]) -> Result<f64> {
    let g = check_action(mdp, s, a)?;
    if z.len() != mdp.n_states() {
        return Err(Error::invalid(format!("z has length {}, expected {}", z.len(), mdp.n_states())));
    }
    if !(z[s.0] > 0.0) {
        return Err(Error::Unreachable { state: s.0, z: z[s.0] });
    }
    let exp_r = mdp.exp_rewards(theta)?;
    Ok(numerator(mdp, &exp_r, g, z, None, &mut []) / z[s.0])
}

/// `∂P(a|s)/∂θ_t` from `z` and its Jacobian (`|S| × T`):
/// `(1/z_s) Σ_{s'} p e^r (f_t z_{s'} + J_{s',t}) - P(a|s) J_{s,t} / z_s`.
pub fn action_prob_grad(
    mdp: &Mdp,
    s: StateId,
    a: ActionId,
    z: &[f64],
    jacobian: ArrayView2<f64>,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let g = check_action(mdp, s, a)?;
    let n = mdp.n_states();
    let tdim = mdp.n_features();
    if z.len() != n || jacobian.dim() != (n, tdim) {
        return Err(Error::invalid(format!(
            "z/Jacobian shapes {}/{:?} do not match {n} states and {tdim} features",
            z.len(),
            jacobian.dim()
        )));
    }
    let zs = z[s.0];
    if !(zs > 0.0) {
        return Err(Error::Unreachable { state: s.0, z: zs });
    }
    let exp_r = mdp.exp_rewards(theta)?;
    let mut dnum = vec![0.0; tdim];
    let columns: Vec<Vec<f64>> = (0..tdim).map(|t| jacobian.column(t).to_vec()).collect();
    let num = numerator(mdp, &exp_r, g, z, Some(&columns), &mut dnum);
    let p = num / zs;
    Ok((0..tdim).map(|t| dnum[t] / zs - p * jacobian[[s.0, t]] / zs).collect())
}

/// The local policy `P(a|s)` of one destination group, for every global
/// action, with gradients when the Jacobian was available.
#[derive(Debug, Clone)]
pub struct GroupPolicy {
    n_features: usize,
    /// Per state: whether the policy is defined (not absorbing, `z_s > 0`).
    defined: Vec<bool>,
    z: Vec<f64>,
    probs: Vec<f64>,
    /// `total_actions × T`, empty without gradients.
    grads: Vec<f64>,
    underflow: usize,
}

impl GroupPolicy {
    /// Policy of group `group` in `sol` with destination set `dest`.
    pub fn from_solution(
        mdp: &Mdp,
        theta: &[f64],
        sol: &ForwardSolution,
        group: usize,
        dest: &DestinationSet,
    ) -> Result<Self> {
        let exp_r = mdp.exp_rewards(theta)?;
        Ok(Self::build(mdp, &exp_r, sol, group, dest, None))
    }

    /// With `only`, probabilities are computed just for the marked states;
    /// the others keep probability zero.
    pub(crate) fn build(
        mdp: &Mdp,
        exp_r: &[f64],
        sol: &ForwardSolution,
        group: usize,
        dest: &DestinationSet,
        only: Option<&[bool]>,
    ) -> Self {
        let n = mdp.n_states();
        let tdim = mdp.n_features();
        let kernel = mdp.kernel();
        let with_grad = sol.jacobian.len() == tdim && tdim > 0;
        let z: Vec<f64> = sol.z.column(group).to_vec();
        let dz: Vec<Vec<f64>> =
            if with_grad { sol.jacobian.iter().map(|j| j.column(group).to_vec()).collect() } else { Vec::new() };
        let mut defined = vec![false; n];
        let mut probs = vec![0.0; kernel.total_actions()];
        let mut grads = if with_grad { vec![0.0; kernel.total_actions() * tdim] } else { Vec::new() };
        let mut dnum = vec![0.0; if with_grad { tdim } else { 0 }];
        let mut underflow = 0;
        for s in 0..n {
            let zs = z[s];
            if zs > 0.0 && zs < UNDERFLOW_Z {
                underflow += 1;
            }
            if dest.contains(StateId(s)) || !(zs > 0.0) {
                continue;
            }
            defined[s] = true;
            if only.is_some_and(|o| !o[s]) {
                continue;
            }
            for g in kernel.action_range(StateId(s)) {
                let num = numerator(mdp, exp_r, g, &z, with_grad.then_some(dz.as_slice()), &mut dnum);
                let p = num / zs;
                probs[g] = p;
                if with_grad {
                    for t in 0..tdim {
                        grads[g * tdim + t] = dnum[t] / zs - p * dz[t][s] / zs;
                    }
                }
            }
        }
        if underflow > 0 {
            warn!("{underflow} states have z below {UNDERFLOW_Z:e}; probabilities there may be inaccurate");
        }
        GroupPolicy { n_features: tdim, defined, z, probs, grads, underflow }
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn has_gradients(&self) -> bool {
        !self.grads.is_empty() || self.n_features == 0
    }

    /// False at absorbing states and states that cannot reach the destination.
    pub fn is_defined(&self, s: StateId) -> bool {
        self.defined[s.0]
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// `P(a|s)` by global action index.
    pub fn prob(&self, global_action: usize) -> f64 {
        self.probs[global_action]
    }

    pub fn grad(&self, global_action: usize) -> &[f64] {
        if self.grads.is_empty() {
            &[]
        } else {
            &self.grads[global_action * self.n_features..(global_action + 1) * self.n_features]
        }
    }

    pub fn underflow_states(&self) -> usize {
        self.underflow
    }

    /// Adds `ln P(a|s)` of every step to `acc`.
    pub(crate) fn score_steps<'a>(
        &self,
        mdp: &Mdp,
        steps: impl IntoIterator<Item = &'a ObservedStep>,
        acc: &mut TrajectoryLogLik,
    ) {
        let zero = vec![0.0; self.n_features];
        for step in steps {
            if !self.defined[step.state.0] {
                acc.fail(format!("state {} cannot reach the destination (z = {:e})", step.state, self.z[step.state.0]));
                return;
            }
            let g = mdp.kernel().action_index(step.state, step.action).expect("validated trajectory");
            let p = self.probs[g];
            if !(p > 0.0) {
                acc.fail(format!("action {} at state {} has probability {p:e}", step.action, step.state));
                return;
            }
            let dp = if self.grads.is_empty() { zero.as_slice() } else { self.grad(g) };
            acc.add_log(p, dp);
        }
    }
}

/// `Σ ln P(a_i|s_i)` and its gradient over `steps` under one group's policy.
pub fn trajectory_loglik(mdp: &Mdp, steps: &[ObservedStep], policy: &GroupPolicy) -> TrajectoryLogLik {
    let mut acc = TrajectoryLogLik::new(mdp.n_features());
    policy.score_steps(mdp, steps, &mut acc);
    acc
}

/// Forward solution for every destination group of a dataset, plus the
/// policies built from it.
pub(crate) struct GroupedPolicies {
    pub grouping: Grouping,
    pub policies: Vec<GroupPolicy>,
    pub underflow: usize,
}

pub(crate) fn grouped_policies(
    mdp: &Mdp,
    theta: &[f64],
    trajectories: &[Trajectory],
    with_grad: bool,
) -> Result<GroupedPolicies> {
    grouped_policies_with(mdp, theta, trajectories, with_grad, ForwardMethod::Direct, false)
}

/// How `z` and its Jacobian are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMethod {
    /// Sparse LU factorization and triangular solves.
    Direct,
    /// Fixed-point iteration to tolerance `eps`.
    ValueIteration { eps: f64, k_max: usize },
}

fn grouped_policies_with(
    mdp: &Mdp,
    theta: &[f64],
    trajectories: &[Trajectory],
    with_grad: bool,
    method: ForwardMethod,
    observed_only: bool,
) -> Result<GroupedPolicies> {
    mdp.check_theta(theta)?;
    for (i, t) in trajectories.iter().enumerate() {
        t.validate(mdp).map_err(|e| Error::invalid(format!("trajectory {i}: {e}")))?;
    }
    let grouping = Grouping::by_destination(trajectories);
    if grouping.groups.is_empty() {
        return Ok(GroupedPolicies { grouping, policies: Vec::new(), underflow: 0 });
    }
    let sol = match method {
        ForwardMethod::Direct => solve_forward(mdp, theta, &grouping.groups, with_grad)?,
        ForwardMethod::ValueIteration { eps, k_max } => {
            let (mut sol, _) = value_iteration_forward(mdp, theta, &grouping.groups, eps, k_max)?;
            if !with_grad {
                sol.jacobian.clear();
            }
            sol
        }
    };
    let exp_r = mdp.exp_rewards(theta)?;
    // states whose actions are scored, per group
    let masks = observed_only.then(|| {
        let mut masks = vec![vec![false; mdp.n_states()]; grouping.groups.len()];
        for (t, &g) in trajectories.iter().zip(&grouping.assignment) {
            t.steps().for_each(|step| masks[g][step.state.0] = true);
        }
        masks
    });
    let policies: Vec<GroupPolicy> = grouping
        .groups
        .iter()
        .enumerate()
        .map(|(i, d)| GroupPolicy::build(mdp, &exp_r, &sol, i, d, masks.as_ref().map(|m| m[i].as_slice())))
        .collect();
    let underflow = policies.iter().map(|p| p.underflow).max().unwrap_or(0);
    Ok(GroupedPolicies { grouping, policies, underflow })
}

fn observed_loglik(
    mdp: &Mdp,
    theta: &[f64],
    trajectories: &[Trajectory],
    with_grad: bool,
    method: ForwardMethod,
) -> Result<LogLik> {
    let gp = grouped_policies_with(mdp, theta, trajectories, with_grad, method, true)?;
    let terms = trajectories
        .iter()
        .zip(&gp.grouping.assignment)
        .map(|(t, &g)| {
            let mut acc = TrajectoryLogLik::new(mdp.n_features());
            gp.policies[g].score_steps(mdp, t.steps(), &mut acc);
            acc
        })
        .collect();
    let diagnostics = Diagnostics { underflow_states: gp.underflow, ..Default::default() };
    Ok(accumulate(mdp.n_features(), terms, diagnostics))
}

/// Log-likelihood of fully observed trajectories: one factorization and
/// `T + 1` solve batches for the whole dataset.
pub fn dataset_loglik(trajectories: &[Trajectory], mdp: &Mdp, theta: &[f64]) -> Result<LogLik> {
    if let Some(i) = trajectories.iter().position(|t| !t.is_complete()) {
        return Err(Error::invalid(format!("trajectory {i} has missing segments")));
    }
    observed_loglik(mdp, theta, trajectories, true, ForwardMethod::Direct)
}

/// Value of [`dataset_loglik`] without the Jacobian solves.
pub fn dataset_loglik_value(trajectories: &[Trajectory], mdp: &Mdp, theta: &[f64]) -> Result<LogLik> {
    if let Some(i) = trajectories.iter().position(|t| !t.is_complete()) {
        return Err(Error::invalid(format!("trajectory {i} has missing segments")));
    }
    observed_loglik(mdp, theta, trajectories, false, ForwardMethod::Direct)
}

/// Scores only the observed steps of each trajectory under its own
/// destination and ignores every missing segment.
pub fn connected_loglik(trajectories: &[Trajectory], mdp: &Mdp, theta: &[f64]) -> Result<LogLik> {
    observed_loglik(mdp, theta, trajectories, true, ForwardMethod::Direct)
}

/// [`dataset_loglik`] with a chosen forward method.
pub fn dataset_loglik_with(trajectories: &[Trajectory], mdp: &Mdp, theta: &[f64], method: ForwardMethod) -> Result<LogLik> {
    if let Some(i) = trajectories.iter().position(|t| !t.is_complete()) {
        return Err(Error::invalid(format!("trajectory {i} has missing segments")));
    }
    observed_loglik(mdp, theta, trajectories, true, method)
}

/// Sum of `P(a|s)` over the actions available at `s`, for normalization checks.
pub fn policy_row_sum(mdp: &Mdp, policy: &GroupPolicy, s: StateId) -> f64 {
    mdp.kernel().action_range(s).map(|g| policy.prob(g)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;
    use crate::testutil::{asymmetric_diamond, chain, diamond};

    fn z_for(mdp: &Mdp, theta: &[f64], dest: usize) -> ForwardSolution {
        solve_forward(mdp, theta, &[DestinationSet::single(StateId(dest))], true).unwrap()
    }

    fn path(steps: &[(usize, usize)], dest: usize) -> Trajectory {
        Trajectory::complete(
            StateId(steps.first().map_or(dest, |s| s.0)),
            StateId(dest),
            steps.iter().map(|&(s, a)| ObservedStep::new(s, a)).collect(),
        )
    }

    #[test]
    fn single_action_has_probability_one() {
        let mdp = chain();
        let sol = z_for(&mdp, &[-1.0], 2);
        let p = action_prob(&mdp, StateId(0), ActionId(0), &sol.z_column(0), &[-1.0]).unwrap();
        assert!((p - 1.0).abs() < 1e-15);
        let g = action_prob_grad(&mdp, StateId(0), ActionId(0), &sol.z_column(0), sol.jacobian_columns(0).view(), &[-1.0]).unwrap();
        assert!(g[0].abs() < 1e-15);
    }

    #[test]
    fn diamond_probabilities() {
        let mdp = diamond();
        let sol = z_for(&mdp, &[-1.0], 3);
        let z = sol.z_column(0);
        let p = action_prob(&mdp, StateId(0), ActionId(0), &z, &[-1.0]).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
        let g = action_prob_grad(&mdp, StateId(0), ActionId(0), &z, sol.jacobian_columns(0).view(), &[-1.0]).unwrap();
        assert!(g[0].abs() < 1e-15);

        let mdp = asymmetric_diamond();
        let sol = z_for(&mdp, &[-1.0], 3);
        let p = action_prob(&mdp, StateId(0), ActionId(0), &sol.z_column(0), &[-1.0]).unwrap();
        let expected = (-2.0f64).exp() / ((-2.0f64).exp() + (-3.0f64).exp());
        assert!((p - expected).abs() < 1e-14);
        assert!((p - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn unreachable_state_is_an_error() {
        let mdp = diamond();
        let z = vec![0.0, 1.0, 1.0, 1.0];
        assert!(matches!(
            action_prob(&mdp, StateId(0), ActionId(0), &z, &[-1.0]),
            Err(Error::Unreachable { state: 0, .. })
        ));
    }

    #[test]
    fn action_gradient_matches_finite_differences() {
        let mdp = asymmetric_diamond();
        let theta = -0.7;
        let sol = z_for(&mdp, &[theta], 3);
        let g = action_prob_grad(&mdp, StateId(0), ActionId(1), &sol.z_column(0), sol.jacobian_columns(0).view(), &[theta]).unwrap();
        let h = 1e-6;
        let at = |t: f64| {
            let s = z_for(&mdp, &[t], 3);
            action_prob(&mdp, StateId(0), ActionId(1), &s.z_column(0), &[t]).unwrap()
        };
        let fd = (at(theta + h) - at(theta - h)) / (2.0 * h);
        assert!((g[0] - fd).abs() < 1e-8 * (1.0 + fd.abs()), "{} vs {fd}", g[0]);
    }

    #[test]
    fn trajectory_values() {
        let mdp = chain();
        let ll = dataset_loglik(&[path(&[(0, 0), (1, 0)], 2)], &mdp, &[-1.0]).unwrap();
        assert_eq!(ll.value, 0.0);

        let mdp = diamond();
        let via1 = path(&[(0, 0), (1, 0)], 3);
        let via2 = path(&[(0, 1), (2, 0)], 3);
        let ll = dataset_loglik(std::slice::from_ref(&via1), &mdp, &[-1.0]).unwrap();
        assert!((ll.value - 0.5f64.ln()).abs() < 1e-14);
        assert!((ll.value + std::f64::consts::LN_2).abs() < 1e-12);
        let ll = dataset_loglik(&[via1.clone(), via2], &mdp, &[-1.0]).unwrap();
        assert!((ll.value - 2.0 * 0.5f64.ln()).abs() < 1e-14);
        let copies = vec![via1; 7];
        let ll = dataset_loglik(&copies, &mdp, &[-1.0]).unwrap();
        assert!((ll.value - 7.0 * 0.5f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn empty_dataset() {
        let ll = dataset_loglik(&[], &diamond(), &[-1.0]).unwrap();
        assert_eq!(ll.value, 0.0);
        assert_eq!(ll.grad, vec![0.0]);
    }

    #[test]
    fn full_likelihood_uses_one_factorization_and_t_plus_one_batches() {
        let mdp = diamond();
        let data = vec![path(&[(0, 0), (1, 0)], 3), path(&[(1, 0)], 3), path(&[(0, 1)], 2)];
        let (res, st) = stats::measure(|| dataset_loglik(&data, &mdp, &[-1.0]));
        res.unwrap();
        assert_eq!(st.factorizations, 1);
        assert_eq!(st.solve_batches, 2);
    }

    #[test]
    fn value_iteration_likelihood_agrees() {
        let mdp = diamond();
        let data = vec![path(&[(0, 0), (1, 0)], 3), path(&[(0, 1)], 2)];
        let a = dataset_loglik(&data, &mdp, &[-0.4]).unwrap();
        let b = dataset_loglik_with(&data, &mdp, &[-0.4], ForwardMethod::ValueIteration { eps: 1e-13, k_max: 100 }).unwrap();
        assert!((a.value - b.value).abs() < 1e-12 && (a.grad[0] - b.grad[0]).abs() < 1e-12);
    }

    #[test]
    fn step_at_unreachable_state_is_infeasible() {
        // 4 only leads to 5, so it cannot reach destination 3
        let mdp = crate::testutil::unit_mdp(6, &[(0, 1), (0, 4), (1, 3), (4, 5)]);
        let gp = grouped_policies(&mdp, &[-1.0], &[path(&[(0, 0), (1, 0)], 3)], true).unwrap();
        let t = trajectory_loglik(&mdp, &[ObservedStep::new(4, 0)], &gp.policies[0]);
        assert_eq!(t.value, f64::NEG_INFINITY);
        assert!(t.reason.as_deref().unwrap().contains("cannot reach"));
        let terms = [trajectory_loglik(&mdp, &[ObservedStep::new(0, 0)], &gp.policies[0]), t.clone()];
        let t = TrajectoryLogLik { reason: Some("x".into()), ..t };
        let ll = accumulate(1, vec![terms[0].clone(), t], Diagnostics::default());
        assert_eq!(ll.value, terms[0].value);
        assert_eq!(ll.diagnostics.infeasible.len(), 1);
        assert_eq!(ll.strict_value(), f64::NEG_INFINITY);
    }
}
