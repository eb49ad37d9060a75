//! The forward quantities `z` (one column per destination group) and their
//! Jacobian with respect to θ.
//!
//! `z` solves `(I - M) z = b` and `∂z/∂θ_t` solves
//! `(I - M) ∂z/∂θ_t = (M ∘ F^t) z`. All groups share one factorization of
//! `I - M` whenever their absorbing states carry no outgoing transitions in
//! the kernel. A singleton destination `d` that does have outgoing
//! transitions is folded into the same factorization: with `y = (I - M)^{-1} e_d`,
//! the solution of the system with row `d` of `M` emptied is `y / y_d`
//! (rank-one correction of row `d`). Only multi-state destinations with
//! outgoing transitions need a factorization of their own.

use log::warn;
use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::mdp::{is_acyclic, row_sum_check, DestinationSet, Mdp, StateId};
use crate::sparse::{CsrMatrix, LuFactors};

/// Residual acceptance: `‖(I - M) z - b‖∞ ≤ RESIDUAL_TOL · (1 + ‖b‖∞)`.
pub const RESIDUAL_TOL: f64 = 1e-10;

/// `z` per destination group and, optionally, `∂z/∂θ_t` for every feature.
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    /// `|S| × N_groups`; column `n` is `z` for group `n`.
    pub z: Array2<f64>,
    /// `T` matrices shaped like `z`. Empty when the Jacobian was not requested.
    pub jacobian: Vec<Array2<f64>>,
}

impl ForwardSolution {
    pub fn z_column(&self, group: usize) -> Vec<f64> {
        self.z.column(group).to_vec()
    }

    /// `∂z/∂θ_t` for one group as a `|S| × T` matrix.
    pub fn jacobian_columns(&self, group: usize) -> Array2<f64> {
        let n = self.z.nrows();
        let t = self.jacobian.len();
        Array2::from_shape_fn((n, t), |(s, k)| self.jacobian[k][[s, group]])
    }
}

/// Factorizes `I - M`.
pub fn factorize(m: &CsrMatrix, order: Option<&[usize]>) -> Result<LuFactors> {
    LuFactors::factorize(&m.identity_minus(), order)
}

/// Solves `(I - M) Z = B` on existing factors and checks the residual.
pub fn solve_z(factors: &LuFactors, m: &CsrMatrix, b: &Array2<f64>) -> Result<Array2<f64>> {
    let z = factors.solve(b);
    check_residual(m, &z, b)?;
    Ok(z)
}

/// `U^t = M ∘ F^t` for every feature, on the pattern of `m`.
pub fn feature_weighted(mdp: &Mdp, m: &CsrMatrix) -> Vec<CsrMatrix> {
    (0..mdp.n_features())
        .map(|t| {
            let f = mdp.features().matrix(t);
            let mut values = Vec::with_capacity(m.nnz());
            for r in 0..m.nrows() {
                let (cols, vals) = m.row(r);
                values.extend(cols.iter().zip(vals).map(|(&c, &v)| v * f.get(r, c)));
            }
            m.with_values(values)
        })
        .collect()
}

/// Solves `(I - M) ∂Z/∂θ_t = U^t Z` for every `t`, one batch per feature.
pub fn jacobian_z(factors: &LuFactors, weighted: &[CsrMatrix], z: &Array2<f64>) -> Vec<Array2<f64>> {
    weighted
        .iter()
        .map(|u| factors.solve(&u.mul_dense(z.view())))
        .collect()
}

/// `z^{k+1} = M z^k + b` until `‖z^{k+1} - z^k‖∞ < eps`.
/// Returns the last iterate and the number of updates performed.
pub fn value_iteration(m: &CsrMatrix, b: &[f64], z0: &[f64], eps: f64, k_max: usize) -> Result<(Vec<f64>, usize)> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("value iteration needs eps > 0, got {eps}")));
    }
    if b.len() != m.nrows() || z0.len() != m.nrows() {
        return Err(Error::invalid("value iteration vectors do not match M"));
    }
    if !is_acyclic(m) && !row_sum_check(m).holds {
        warn!("value iteration on an M that is neither acyclic nor row-sum contracting; convergence is not guaranteed");
    }
    let mut z = z0.to_vec();
    let mut delta = f64::INFINITY;
    for k in 1..=k_max {
        let mut next = m.mul_vec(&z);
        for (v, &bi) in next.iter_mut().zip(b) {
            *v += bi;
        }
        delta = next.iter().zip(&z).fold(0.0, |acc: f64, (a, c)| acc.max((a - c).abs()));
        z = next;
        if delta < eps {
            return Ok((z, k));
        }
        if !delta.is_finite() {
            break;
        }
    }
    Err(Error::NotConverged { iterations: k_max, residual: delta })
}

/// Default value-iteration cap, `10·|S| + 1000`.
pub fn default_k_max(n_states: usize) -> usize {
    10 * n_states + 1000
}

/// Smallest `k` with `τ^k ≤ ε`, i.e. `⌈ln ε / ln τ⌉`.
pub fn iteration_bound(tau: f64, eps: f64) -> Result<usize> {
    if !(tau > 0.0 && tau < 1.0 && eps > 0.0 && eps < 1.0) {
        return Err(Error::BoundInapplicable { tau, eps });
    }
    Ok((eps.ln() / tau.ln()).ceil() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum GroupKind {
    /// Absorbing states have no outgoing transitions: plain column of `B`.
    Sink,
    /// Single absorbing state with outgoing transitions: rank-one correction.
    Pinned(usize),
    /// Needs its own factorization.
    Dedicated,
}

fn classify(mdp: &Mdp, group: &DestinationSet) -> GroupKind {
    let states = group.states();
    if states.iter().all(|&s| !mdp.kernel().has_outflow(s)) {
        GroupKind::Sink
    } else if states.len() == 1 {
        GroupKind::Pinned(states[0].0)
    } else {
        GroupKind::Dedicated
    }
}

fn validate_groups(mdp: &Mdp, groups: &[DestinationSet]) -> Result<()> {
    for g in groups {
        if g.is_empty() {
            return Err(Error::invalid("destination group without absorbing states"));
        }
        for &s in g.states() {
            mdp.check_state(s)?;
        }
    }
    Ok(())
}

fn indicator(n: usize, group: &DestinationSet) -> Vec<f64> {
    let mut b = vec![0.0; n];
    for s in group.states() {
        b[s.0] = 1.0;
    }
    b
}

/// Computes `Z` (and optionally its Jacobian) for every destination group by
/// direct sparse solves: one factorization of `I - M` shared by all
/// groups, `1 + T` solve batches.
pub fn solve_forward(mdp: &Mdp, theta: &[f64], groups: &[DestinationSet], with_jacobian: bool) -> Result<ForwardSolution> {
    validate_groups(mdp, groups)?;
    let n = mdp.n_states();
    let tdim = mdp.n_features();
    let g = groups.len();
    let base = mdp.build_m(theta, &[])?;
    let base_weighted = if with_jacobian { feature_weighted(mdp, &base) } else { Vec::new() };

    let kinds: Vec<GroupKind> = groups.iter().map(|grp| classify(mdp, grp)).collect();
    let mut z = Array2::<f64>::zeros((n, g));
    let mut jac: Vec<Array2<f64>> = (0..if with_jacobian { tdim } else { 0 })
        .map(|_| Array2::zeros((n, g)))
        .collect();

    let shared: Vec<usize> = (0..g).filter(|&i| kinds[i] != GroupKind::Dedicated).collect();
    if !shared.is_empty() {
        let factors = mdp.factorize(&base.identity_minus(), Some(mdp.elimination_order()))?;
        let mut b = Array2::<f64>::zeros((n, shared.len()));
        for (col, &i) in shared.iter().enumerate() {
            for s in groups[i].states() {
                b[[s.0, col]] = 1.0;
            }
        }
        let y = factors.solve(&b);
        let dy = jacobian_z(&factors, &base_weighted, &y);
        for (col, &i) in shared.iter().enumerate() {
            let scale = match kinds[i] {
                GroupKind::Pinned(d) => {
                    let yd = y[[d, col]];
                    if !(yd > 0.0 && yd.is_finite()) {
                        return Err(Error::InvalidSolution(format!(
                            "diagonal of (I - M)^-1 at destination {d} is {yd}; I - M is not an M-matrix at this theta"
                        )));
                    }
                    Some((d, yd))
                }
                _ => None,
            };
            for s in 0..n {
                z[[s, i]] = match scale {
                    Some((_, yd)) => y[[s, col]] / yd,
                    None => y[[s, col]],
                };
            }
            if let Some((d, _)) = scale {
                z[[d, i]] = 1.0;
            }
            for t in 0..jac.len() {
                for s in 0..n {
                    jac[t][[s, i]] = match scale {
                        Some((d, yd)) => (dy[t][[s, col]] - z[[s, i]] * dy[t][[d, col]]) / yd,
                        None => dy[t][[s, col]],
                    };
                }
            }
        }
    }

    for i in (0..g).filter(|&i| kinds[i] == GroupKind::Dedicated) {
        let m = base.without_rows(&groups[i].states().iter().map(|s| s.0).collect::<Vec<_>>());
        let factors = mdp.factorize(&m.identity_minus(), Some(mdp.elimination_order()))?;
        let b = Array2::from_shape_vec((n, 1), indicator(n, &groups[i])).expect("shape");
        let zi = factors.solve(&b);
        z.column_mut(i).assign(&zi.column(0));
        if with_jacobian {
            let weighted = feature_weighted(mdp, &m);
            for (t, dz) in jacobian_z(&factors, &weighted, &zi).into_iter().enumerate() {
                jac[t].column_mut(i).assign(&dz.column(0));
            }
        }
    }

    check_group_residuals(&base, groups, &z)?;
    clean_negative(&mut z)?;
    // exact zeros where the destination is out of reach, instead of round-off
    for (i, grp) in groups.iter().enumerate() {
        let reach = mdp.can_reach(grp.states());
        for s in (0..n).filter(|&s| !reach[s]) {
            z[[s, i]] = 0.0;
            for j in jac.iter_mut() {
                j[[s, i]] = 0.0;
            }
        }
    }
    Ok(ForwardSolution { z, jacobian: jac })
}

/// The same quantities as [`solve_forward`] computed by fixed-point
/// iteration: `Z ← M Z + B` and `J^t ← M J^t + U^t Z`, with absorbing rows
/// held at their boundary values. Returns the solution and iteration count.
pub fn value_iteration_forward(
    mdp: &Mdp,
    theta: &[f64],
    groups: &[DestinationSet],
    eps: f64,
    k_max: usize,
) -> Result<(ForwardSolution, usize)> {
    validate_groups(mdp, groups)?;
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("value iteration needs eps > 0, got {eps}")));
    }
    let n = mdp.n_states();
    let g = groups.len();
    let base = mdp.build_m(theta, &[])?;
    let weighted = feature_weighted(mdp, &base);
    let mut absorbing = Array2::<f64>::zeros((n, g));
    for (i, grp) in groups.iter().enumerate() {
        for s in grp.states() {
            absorbing[[s.0, i]] = 1.0;
        }
    }
    let pin = |mat: &mut Array2<f64>, value: f64| {
        for ((s, i), a) in absorbing.indexed_iter() {
            if *a == 1.0 {
                mat[[s, i]] = value;
            }
        }
    };

    let mut z = absorbing.clone();
    let mut jac: Vec<Array2<f64>> = (0..weighted.len()).map(|_| Array2::zeros((n, g))).collect();
    let mut delta = f64::INFINITY;
    for k in 1..=k_max {
        let mut z_next = base.mul_dense(z.view());
        pin(&mut z_next, 1.0);
        delta = max_abs_diff(&z_next, &z);
        let mut jac_next = Vec::with_capacity(jac.len());
        for (u, j) in weighted.iter().zip(&jac) {
            let mut next = base.mul_dense(j.view()) + u.mul_dense(z.view());
            pin(&mut next, 0.0);
            delta = delta.max(max_abs_diff(&next, j));
            jac_next.push(next);
        }
        z = z_next;
        jac = jac_next;
        if delta < eps {
            return Ok((ForwardSolution { z, jacobian: jac }, k));
        }
        if !delta.is_finite() {
            break;
        }
    }
    Err(Error::NotConverged { iterations: k_max, residual: delta })
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()))
}

fn check_residual(m: &CsrMatrix, z: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    let mz = m.mul_dense(z.view());
    for col in 0..z.ncols() {
        let bnorm = b.column(col).iter().fold(0.0, |a: f64, v| a.max(v.abs()));
        let tol = RESIDUAL_TOL * (1.0 + bnorm);
        let res = (0..z.nrows()).fold(0.0, |a: f64, s| a.max((z[[s, col]] - mz[[s, col]] - b[[s, col]]).abs()));
        if !(res <= tol) {
            return Err(Error::Residual { residual: res, tolerance: tol });
        }
    }
    Ok(())
}

/// Residual of every group column against its own system (absorbing rows emptied).
fn check_group_residuals(base: &CsrMatrix, groups: &[DestinationSet], z: &Array2<f64>) -> Result<()> {
    let mz = base.mul_dense(z.view());
    for (i, grp) in groups.iter().enumerate() {
        let tol = RESIDUAL_TOL * 2.0;
        let mut res = 0.0f64;
        for s in 0..z.nrows() {
            let r = if grp.contains(StateId(s)) { z[[s, i]] - 1.0 } else { z[[s, i]] - mz[[s, i]] };
            res = res.max(r.abs());
        }
        if !(res <= tol) {
            return Err(Error::Residual { residual: res, tolerance: tol });
        }
    }
    Ok(())
}

/// Rejects materially negative `z` and zeroes round-off negatives.
fn clean_negative(z: &mut Array2<f64>) -> Result<()> {
    for (i, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        let scale = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (s, v) in col.iter_mut().enumerate() {
            if *v < 0.0 {
                if *v < -1e-12 * scale {
                    return Err(Error::InvalidSolution(format!(
                        "z[{s}] = {v:e} for group {i} is negative; I - M is not an M-matrix at this theta"
                    )));
                }
                *v = 0.0;
            }
        }
    }
    Ok(())
}
