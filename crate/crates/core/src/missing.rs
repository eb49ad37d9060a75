//! Reach probabilities `P(v|u)` across missing segments and their gradients.
//!
//! All gaps of one destination group are solved together: with the policy
//! matrix `Q0_{s,s'} = Σ_a p(s|a,s') P(a|s')` padded by an artificial state,
//! `(I - Q0) Π = D` where column `k` of `D` marks `u_k` and the artificial
//! state. `Π_{v_k,k}` is then the probability of reaching `v_k` from `u_k`.

use std::collections::VecDeque;

use log::warn;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::likelihood::{accumulate, grouped_policies, Diagnostics, GroupPolicy, LogLik, TrajectoryLogLik};
use crate::mdp::{Mdp, StateId};
use crate::sparse::{CsrMatrix, LuFactors};
use crate::trajectory::{MissingPair, Trajectory};

/// Residual acceptance for `(I - Q0) Π = D`.
pub const REACH_RESIDUAL_TOL: f64 = 1e-10;
/// Round-off band within which reach probabilities are clamped.
pub const CLAMP_TOL: f64 = 1e-9;
/// Allowed deviation of a policy row sum from 1.
pub const POLICY_SUM_TOL: f64 = 1e-8;

/// `Q0` of size `(|S|+1) × (|S|+1)` and its θ-derivatives on the same pattern.
#[derive(Debug, Clone)]
pub struct PolicyMatrix {
    pub q0: CsrMatrix,
    /// `∂Q0/∂θ_t`; empty when the policy carries no gradients.
    pub dq0: Vec<CsrMatrix>,
}

impl PolicyMatrix {
    /// Size including the artificial state.
    pub fn dim(&self) -> usize {
        self.q0.nrows()
    }

    /// Index of the artificial state.
    pub fn artificial(&self) -> usize {
        self.dim() - 1
    }
}

/// `Π` (one column per pair) and `∂Π/∂θ_t`.
#[derive(Debug, Clone)]
pub struct ReachSolution {
    pub pi: Array2<f64>,
    pub jacobian: Vec<Array2<f64>>,
}

impl ReachSolution {
    /// `P(v_k|u_k) = Π_{v_k,k}`.
    pub fn reach_probability(&self, k: usize, v: StateId) -> f64 {
        self.pi[[v.0, k]]
    }
}

/// Assembles `Q0` from a group's policy. Columns of states where the policy
/// is undefined (absorbing or unable to reach the destination) stay empty.
pub fn build_q0(mdp: &Mdp, policy: &GroupPolicy) -> Result<PolicyMatrix> {
    let n = mdp.n_states();
    let tdim = mdp.n_features();
    let kernel = mdp.kernel();
    let with_grad = tdim > 0 && policy.has_gradients();
    let mut trip = Vec::with_capacity(kernel.entry_count());
    let mut dtrip: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); if with_grad { tdim } else { 0 }];
    for from in 0..n {
        if !policy.is_defined(StateId(from)) {
            continue;
        }
        let mut sum = 0.0;
        for g in kernel.action_range(StateId(from)) {
            let pa = policy.prob(g);
            sum += pa;
            let (succ, prob) = kernel.outcomes(g);
            for (&to, &p) in succ.iter().zip(prob) {
                trip.push((to, from, p * pa));
                if with_grad {
                    for (t, d) in policy.grad(g).iter().enumerate() {
                        dtrip[t].push((to, from, p * d));
                    }
                }
            }
        }
        if (sum - 1.0).abs() > POLICY_SUM_TOL {
            return Err(Error::UnnormalizedPolicy { state: from, sum });
        }
    }
    Ok(PolicyMatrix {
        q0: CsrMatrix::from_triplets(n + 1, n + 1, &trip),
        dq0: dtrip.iter().map(|tr| CsrMatrix::from_triplets(n + 1, n + 1, tr)).collect(),
    })
}

/// `D_{s,k} = 1` for `s = u_k` and for the artificial state `|S|`.
pub fn build_d(n_states: usize, pairs: &[MissingPair]) -> Array2<f64> {
    let mut d = Array2::zeros((n_states + 1, pairs.len()));
    for (k, pair) in pairs.iter().enumerate() {
        d[[n_states, k]] = 1.0;
        d[[pair.u.0, k]] = 1.0;
    }
    d
}

/// Elimination order for `I - Q0`: the MDP's order with the artificial state last.
pub fn reach_order(mdp: &Mdp) -> Vec<usize> {
    let mut order = mdp.elimination_order().to_vec();
    order.push(mdp.n_states());
    order
}

/// Factorizes `I - Q0`.
pub fn factorize_reach(pm: &PolicyMatrix, order: Option<&[usize]>) -> Result<LuFactors> {
    LuFactors::factorize(&pm.q0.identity_minus(), order)
}

/// Solves `(I - Q0) Π = D` on one factorization, followed by the `T`
/// gradient systems when `with_grad` is set.
pub fn solve_reach(pm: &PolicyMatrix, d: &Array2<f64>, order: Option<&[usize]>, with_grad: bool) -> Result<ReachSolution> {
    if d.nrows() != pm.dim() {
        return Err(Error::invalid(format!("D has {} rows, Q0 has {}", d.nrows(), pm.dim())));
    }
    solve_reach_factored(&factorize_reach(pm, order)?, pm, d, with_grad)
}

/// [`solve_reach`] on existing factors of `I - Q0`.
pub fn solve_reach_factored(factors: &LuFactors, pm: &PolicyMatrix, d: &Array2<f64>, with_grad: bool) -> Result<ReachSolution> {
    if d.nrows() != pm.dim() || factors.dim() != pm.dim() {
        return Err(Error::invalid(format!("D has {} rows, Q0 has {}", d.nrows(), pm.dim())));
    }
    let pi = factors.solve(d);
    check_residual(&pm.q0, &pi, d)?;
    let jacobian = if with_grad { reach_grad(factors, &pm.dq0, &pi) } else { Vec::new() };
    Ok(ReachSolution { pi, jacobian })
}

/// `∂Π/∂θ_t` from `(I - Q0) ∂Π/∂θ_t = (∂Q0/∂θ_t) Π`, one batch per feature.
pub fn reach_grad(factors: &LuFactors, dq0: &[CsrMatrix], pi: &Array2<f64>) -> Vec<Array2<f64>> {
    dq0.iter().map(|dq| factors.solve(&dq.mul_dense(pi.view()))).collect()
}

/// Reach probabilities from a single source `u`: solves `(I - Q^u) π = e_u`
/// where `Q^u` is the `S × S` block of `Q0` with row `u` emptied.
pub fn solve_reach_single(mdp: &Mdp, policy: &GroupPolicy, u: StateId) -> Result<Vec<f64>> {
    mdp.check_state(u)?;
    let n = mdp.n_states();
    let pm = build_q0(mdp, policy)?;
    let (indptr, indices, values) = (pm.q0.indptr(), pm.q0.indices(), pm.q0.values());
    let mut trip = Vec::with_capacity(pm.q0.nnz());
    for r in (0..n).filter(|&r| r != u.0) {
        for k in indptr[r]..indptr[r + 1] {
            if indices[k] < n {
                trip.push((r, indices[k], values[k]));
            }
        }
    }
    let q = CsrMatrix::from_triplets(n, n, &trip);
    let factors = LuFactors::factorize(&q.identity_minus(), Some(mdp.elimination_order()))?;
    let mut d = Array2::zeros((n, 1));
    d[[u.0, 0]] = 1.0;
    let pi = factors.solve(&d);
    check_residual(&q, &pi, &d)?;
    Ok(pi.column(0).to_vec())
}

fn check_residual(q: &CsrMatrix, pi: &Array2<f64>, d: &Array2<f64>) -> Result<()> {
    let qp = q.mul_dense(pi.view());
    for k in 0..pi.ncols() {
        let scale = pi.column(k).iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let tol = REACH_RESIDUAL_TOL * scale;
        let res = (0..pi.nrows()).fold(0.0f64, |a, s| a.max((pi[[s, k]] - qp[[s, k]] - d[[s, k]]).abs()));
        if !(res <= tol) {
            return Err(Error::Residual { residual: res, tolerance: tol });
        }
    }
    Ok(())
}

/// True iff `v` can be reached from `u` through transitions of positive
/// policy probability.
fn reachable(q0t: &CsrMatrix, u: usize, v: usize) -> bool {
    let mut seen = vec![false; q0t.nrows()];
    let mut queue = VecDeque::from([u]);
    seen[u] = true;
    while let Some(s) = queue.pop_front() {
        if s == v {
            return true;
        }
        let (cols, vals) = q0t.row(s);
        for (&c, &w) in cols.iter().zip(vals) {
            if w > 0.0 && !seen[c] {
                seen[c] = true;
                queue.push_back(c);
            }
        }
    }
    false
}

/// Log-likelihood of trajectories with missing segments: observed steps
/// contribute `ln P(a|s)` and every gap `(u, v)` contributes `ln P(v|u)`.
/// The forward system takes `T + 1` batches and each destination group with
/// gaps another `T + 1`, independent of the number of gaps.
pub fn incomplete_dataset_loglik(trajectories: &[Trajectory], mdp: &Mdp, theta: &[f64]) -> Result<LogLik> {
    incomplete_loglik(trajectories, mdp, theta, true)
}

/// Value of [`incomplete_dataset_loglik`] without gradient solves.
pub fn incomplete_dataset_loglik_value(trajectories: &[Trajectory], mdp: &Mdp, theta: &[f64]) -> Result<LogLik> {
    incomplete_loglik(trajectories, mdp, theta, false)
}

fn incomplete_loglik(trajectories: &[Trajectory], mdp: &Mdp, theta: &[f64], with_grad: bool) -> Result<LogLik> {
    let n = mdp.n_states();
    let tdim = mdp.n_features();
    let gp = grouped_policies(mdp, theta, trajectories, with_grad)?;
    let mut diagnostics = Diagnostics { underflow_states: gp.underflow, ..Default::default() };
    let mut terms: Vec<TrajectoryLogLik> = trajectories
        .iter()
        .zip(&gp.grouping.assignment)
        .map(|(t, &g)| {
            let mut acc = TrajectoryLogLik::new(tdim);
            gp.policies[g].score_steps(mdp, t.steps(), &mut acc);
            acc
        })
        .collect();

    let order = reach_order(mdp);
    let mut dp = vec![0.0; tdim];
    for (g, policy) in gp.policies.iter().enumerate() {
        // (trajectory, pair) for every gap of this group, in trajectory order
        let mut owners = Vec::new();
        let mut pairs = Vec::new();
        for (i, t) in trajectories.iter().enumerate().filter(|&(i, _)| gp.grouping.assignment[i] == g) {
            for (u, v) in t.gaps() {
                owners.push(i);
                pairs.push(MissingPair { u, v, group: g });
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let pm = build_q0(mdp, policy)?;
        let d = build_d(n, &pairs);
        let factors = mdp.factorize(&pm.q0.identity_minus(), Some(&order))?;
        let reach = solve_reach_factored(&factors, &pm, &d, with_grad)?;
        let mut q0t: Option<CsrMatrix> = None;
        for (k, (pair, &owner)) in pairs.iter().zip(&owners).enumerate() {
            let mut p = reach.reach_probability(k, pair.v);
            if p <= CLAMP_TOL {
                let q0t = q0t.get_or_insert_with(|| pm.q0.transpose());
                if !reachable(q0t, pair.u.0, pair.v.0) {
                    terms[owner].fail(format!("state {} cannot be reached from {} under the current policy", pair.v, pair.u));
                    continue;
                }
                if p <= 0.0 {
                    if p < -CLAMP_TOL {
                        return Err(Error::InvalidSolution(format!(
                            "reach probability {p:e} for gap ({}, {}) is negative",
                            pair.u, pair.v
                        )));
                    }
                    terms[owner].fail(format!("reach probability for gap ({}, {}) underflowed", pair.u, pair.v));
                    continue;
                }
            } else if p > 1.0 && p <= 1.0 + CLAMP_TOL {
                // only round-off above 1 is pulled back; larger values are expected visits on cyclic graphs
                diagnostics.clamped += 1;
                diagnostics.max_clamp = diagnostics.max_clamp.max(p - 1.0);
                p = 1.0;
            }
            for (t, v) in dp.iter_mut().enumerate() {
                *v = if with_grad { reach.jacobian[t][[pair.v.0, k]] } else { 0.0 };
            }
            terms[owner].add_log(p, &dp);
        }
    }
    if diagnostics.clamped > 0 {
        warn!("clamped {} reach probabilities (largest excess {:e})", diagnostics.clamped, diagnostics.max_clamp);
    }
    Ok(accumulate(tdim, terms, diagnostics))
}

/// Number of destination groups that contain at least one gap.
pub fn groups_with_gaps(trajectories: &[Trajectory]) -> usize {
    let mut dests: Vec<StateId> = trajectories.iter().filter(|t| !t.is_complete()).map(|t| t.dest).collect();
    dests.sort_unstable();
    dests.dedup();
    dests.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::solve_forward;
    use crate::likelihood::dataset_loglik;
    use crate::mdp::DestinationSet;
    use crate::stats;
    use crate::testutil::{asymmetric_diamond, chain, diamond};
    use crate::trajectory::{ObservedStep, Segment};

    fn policy(mdp: &Mdp, theta: &[f64], dest: usize) -> GroupPolicy {
        let groups = [DestinationSet::single(StateId(dest))];
        let sol = solve_forward(mdp, theta, &groups, true).unwrap();
        GroupPolicy::from_solution(mdp, theta, &sol, 0, &groups[0]).unwrap()
    }

    fn pair(u: usize, v: usize) -> MissingPair {
        MissingPair { u: StateId(u), v: StateId(v), group: 0 }
    }

    fn reach(mdp: &Mdp, theta: &[f64], dest: usize, pairs: &[MissingPair]) -> ReachSolution {
        let pm = build_q0(mdp, &policy(mdp, theta, dest)).unwrap();
        solve_reach(&pm, &build_d(mdp.n_states(), pairs), None, true).unwrap()
    }

    fn gapped(origin: usize, dest: usize, segments: Vec<Segment>) -> Trajectory {
        Trajectory { origin: StateId(origin), dest: StateId(dest), segments }
    }

    #[test]
    fn q0_examples() {
        let mdp = chain();
        let pm = build_q0(&mdp, &policy(&mdp, &[-1.0], 2)).unwrap();
        assert_eq!(pm.dim(), 4);
        assert!((pm.q0.get(1, 0) - 1.0).abs() < 1e-15);
        assert!((pm.q0.get(2, 1) - 1.0).abs() < 1e-15);
        assert_eq!(pm.q0.nnz(), 2);

        let mdp = diamond();
        let pm = build_q0(&mdp, &policy(&mdp, &[-1.0], 3)).unwrap();
        assert!((pm.q0.get(1, 0) - 0.5).abs() < 1e-15);
        assert!((pm.q0.get(2, 0) - 0.5).abs() < 1e-15);
        assert!((pm.q0.get(3, 1) - 1.0).abs() < 1e-15);
        assert!((pm.q0.get(3, 2) - 1.0).abs() < 1e-15);
        for s in 0..5 {
            assert_eq!(pm.q0.get(4, s), 0.0);
            assert_eq!(pm.q0.get(s, 4), 0.0);
        }
    }

    #[test]
    fn q0_without_transitions_is_zero() {
        let mdp = crate::testutil::unit_mdp(3, &[]);
        let pm = build_q0(&mdp, &policy(&mdp, &[-1.0], 2)).unwrap();
        assert!(pm.q0.is_zero());
    }

    #[test]
    fn d_columns() {
        assert_eq!(build_d(4, &[]).dim(), (5, 0));
        let d = build_d(4, &[pair(0, 3), pair(0, 2)]);
        assert_eq!(d.column(0).to_vec(), vec![1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(d.column(0), d.column(1));
    }

    #[test]
    fn reach_examples() {
        let r = reach(&chain(), &[-1.0], 2, &[pair(0, 2)]);
        assert!((r.reach_probability(0, StateId(2)) - 1.0).abs() < 1e-14);
        assert!(r.jacobian[0][[2, 0]].abs() < 1e-14);

        let r = reach(&diamond(), &[-1.0], 3, &[pair(0, 1), pair(0, 3)]);
        assert!((r.reach_probability(0, StateId(1)) - 0.5).abs() < 1e-14);
        assert!((r.reach_probability(1, StateId(3)) - 1.0).abs() < 1e-14);
        assert!(r.jacobian[0][[1, 0]].abs() < 1e-14);

        let r = reach(&asymmetric_diamond(), &[-1.0], 3, &[pair(0, 1)]);
        assert!((r.reach_probability(0, StateId(1)) - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn single_source_examples() {
        let mdp = chain();
        let pi = solve_reach_single(&mdp, &policy(&mdp, &[-1.0], 2), StateId(0)).unwrap();
        assert!(pi.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let mdp = diamond();
        let pi = solve_reach_single(&mdp, &policy(&mdp, &[-1.0], 3), StateId(0)).unwrap();
        for (a, b) in pi.iter().zip([1.0, 0.5, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-14);
        }
        let pi = solve_reach_single(&mdp, &policy(&mdp, &[-1.0], 3), StateId(3)).unwrap();
        assert_eq!(pi[3], 1.0);
    }

    #[test]
    fn reach_gradient_matches_finite_differences() {
        let mdp = asymmetric_diamond();
        let theta = -0.4;
        let r = reach(&mdp, &[theta], 3, &[pair(0, 2)]);
        let h = 1e-6;
        let at = |t: f64| reach(&mdp, &[t], 3, &[pair(0, 2)]).reach_probability(0, StateId(2));
        let fd = (at(theta + h) - at(theta - h)) / (2.0 * h);
        assert!((r.jacobian[0][[2, 0]] - fd).abs() < 1e-8);
        assert!(fd.abs() > 1e-3);
    }

    #[test]
    fn gap_likelihood_examples() {
        let mdp = diamond();
        let full = Trajectory::complete(StateId(0), StateId(3), vec![ObservedStep::new(0, 0), ObservedStep::new(1, 0)]);
        let marginal = gapped(0, 3, vec![Segment::Gap { u: StateId(0), v: StateId(3) }]);
        let ll_full = incomplete_dataset_loglik(std::slice::from_ref(&full), &mdp, &[-1.0]).unwrap();
        let ll_gap = incomplete_dataset_loglik(&[marginal], &mdp, &[-1.0]).unwrap();
        assert!((ll_full.value - 0.5f64.ln()).abs() < 1e-14);
        assert!(ll_gap.value.abs() < 1e-14);

        // gap between adjacent states with a single connecting action
        let adjacent = gapped(
            0,
            3,
            vec![Segment::Observed(vec![ObservedStep::new(0, 0)]), Segment::Gap { u: StateId(1), v: StateId(3) }],
        );
        let a = incomplete_dataset_loglik(&[adjacent], &mdp, &[-1.0]).unwrap();
        assert!((a.value - ll_full.value).abs() < 1e-14);

        let mdp = chain();
        let t = gapped(0, 2, vec![Segment::Gap { u: StateId(0), v: StateId(2) }]);
        assert!(incomplete_dataset_loglik(&[t], &mdp, &[-1.0]).unwrap().value.abs() < 1e-14);
    }

    #[test]
    fn complete_data_matches_full_likelihood() {
        let mdp = asymmetric_diamond();
        let full = Trajectory::complete(StateId(0), StateId(3), vec![ObservedStep::new(0, 1), ObservedStep::new(2, 0)]);
        let a = incomplete_dataset_loglik(std::slice::from_ref(&full), &mdp, &[-0.3]).unwrap();
        let b = dataset_loglik(&[full], &mdp, &[-0.3]).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn unreachable_gap_is_excluded() {
        // 1 → 3 and 2 → 3 only; a gap from 1 to 2 is impossible
        let mdp = diamond();
        let bad = gapped(1, 3, vec![Segment::Gap { u: StateId(1), v: StateId(2) }, Segment::Observed(vec![ObservedStep::new(2, 0)])]);
        let ok = gapped(0, 3, vec![Segment::Gap { u: StateId(0), v: StateId(3) }]);
        let ll = incomplete_dataset_loglik(&[ok, bad], &mdp, &[-1.0]).unwrap();
        assert_eq!(ll.diagnostics.infeasible.len(), 1);
        assert_eq!(ll.diagnostics.infeasible[0].trajectory, 1);
        assert!(ll.value.is_finite());
    }

    #[test]
    fn batch_count_is_independent_of_gap_count() {
        let mdp = diamond();
        let t = gapped(0, 3, vec![Segment::Gap { u: StateId(0), v: StateId(3) }]);
        for k in [1, 10, 100] {
            let data = vec![t.clone(); k];
            let (res, st) = stats::measure(|| incomplete_dataset_loglik(&data, &mdp, &[-1.0]));
            res.unwrap();
            assert_eq!(st.solve_batches, 2 * 2, "K = {k}");
            assert_eq!(st.factorizations, 2);
        }
    }
}
