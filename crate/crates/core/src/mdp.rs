//! MDP representation: transition kernel, transition features and the
//! linear-in-parameters reward, plus the matrix `M` that drives the forward
//! recursion and the two invertibility checks on it.

use std::collections::VecDeque;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{minimum_degree, CsrMatrix, LuFactors, SymbolicCache};

/// Tolerance on the sum of a kernel row.
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub usize);

impl StateId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index of an action among those available at a given state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub usize);

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `p(s'|a,s)`: for every state, a list of actions, each a sparse successor
/// distribution.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    n_states: usize,
    action_ptr: Vec<usize>,
    succ_ptr: Vec<usize>,
    succ: Vec<usize>,
    prob: Vec<f64>,
}

impl TransitionKernel {
    /// `actions[s][a]` lists `(successor, probability)` for action `a` at `s`.
    /// An action with an empty list is unavailable.
    pub fn new(n_states: usize, actions: Vec<Vec<Vec<(usize, f64)>>>) -> Result<Self> {
        if actions.len() != n_states {
            return Err(Error::invalid(format!(
                "kernel lists actions for {} states, expected {n_states}",
                actions.len()
            )));
        }
        let mut action_ptr = vec![0];
        let mut succ_ptr = vec![0];
        let mut succ = Vec::new();
        let mut prob = Vec::new();
        for (s, state_actions) in actions.into_iter().enumerate() {
            for (a, mut row) in state_actions.into_iter().enumerate() {
                row.sort_by_key(|&(t, _)| t);
                let mut total = 0.0;
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
                for (t, p) in row {
                    if t >= n_states {
                        return Err(Error::invalid(format!(
                            "action {a} at state {s} leads to state {t} outside 0..{n_states}"
                        )));
                    }
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::invalid(format!(
                            "probability {p} of action {a} at state {s} is outside [0, 1]"
                        )));
                    }
                    total += p;
                    match merged.last_mut() {
                        Some(last) if last.0 == t => last.1 += p,
                        _ => merged.push((t, p)),
                    }
                }
                if !merged.is_empty() && (total - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::invalid(format!(
                        "action {a} at state {s} has successor probabilities summing to {total}"
                    )));
                }
                for (t, p) in merged {
                    if p > 0.0 {
                        succ.push(t);
                        prob.push(p);
                    }
                }
                succ_ptr.push(succ.len());
            }
            action_ptr.push(succ_ptr.len() - 1);
        }
        Ok(TransitionKernel { n_states, action_ptr, succ_ptr, succ, prob })
    }

    /// Deterministic kernel where every directed edge `(from, to)` is one
    /// action. Actions at a state are ordered by ascending target.
    pub fn deterministic(n_states: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut sorted = edges.to_vec();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate transition ({}, {})", w[0].0, w[0].1)));
        }
        let mut actions: Vec<Vec<Vec<(usize, f64)>>> = vec![Vec::new(); n_states];
        for (from, to) in sorted {
            if from >= n_states {
                return Err(Error::invalid(format!("transition source {from} outside 0..{n_states}")));
            }
            actions[from].push(vec![(to, 1.0)]);
        }
        TransitionKernel::new(n_states, actions)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self, s: StateId) -> usize {
        self.action_ptr[s.0 + 1] - self.action_ptr[s.0]
    }

    pub fn total_actions(&self) -> usize {
        self.succ_ptr.len() - 1
    }

    /// Global index of action `a` at `s`, usable for per-action arrays.
    pub fn action_index(&self, s: StateId, a: ActionId) -> Option<usize> {
        (a.0 < self.n_actions(s)).then(|| self.action_ptr[s.0] + a.0)
    }

    /// Range of global action indices available at `s`.
    pub fn action_range(&self, s: StateId) -> std::ops::Range<usize> {
        self.action_ptr[s.0]..self.action_ptr[s.0 + 1]
    }

    /// Successors and probabilities of a global action index.
    pub fn outcomes(&self, global_action: usize) -> (&[usize], &[f64]) {
        let span = self.succ_ptr[global_action]..self.succ_ptr[global_action + 1];
        (&self.succ[span.clone()], &self.prob[span])
    }

    pub fn successors(&self, s: StateId, a: ActionId) -> Option<(&[usize], &[f64])> {
        self.action_index(s, a).map(|g| self.outcomes(g))
    }

    pub fn has_outflow(&self, s: StateId) -> bool {
        self.action_range(s).any(|g| !self.outcomes(g).0.is_empty())
    }

    /// Position range of a global action's outcomes inside the flat entry arrays.
    pub(crate) fn entry_range(&self, global_action: usize) -> std::ops::Range<usize> {
        self.succ_ptr[global_action]..self.succ_ptr[global_action + 1]
    }

    pub(crate) fn entry_count(&self) -> usize {
        self.succ.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Real,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

/// `F^t_{s,s'} = f(s'|s)_t` for every feature `t`. Missing entries read as 0.
#[derive(Debug, Clone)]
pub struct FeatureTensor {
    specs: Vec<FeatureSpec>,
    matrices: Vec<CsrMatrix>,
}

impl FeatureTensor {
    pub fn new(specs: Vec<FeatureSpec>, matrices: Vec<CsrMatrix>) -> Result<Self> {
        if specs.len() != matrices.len() {
            return Err(Error::invalid(format!(
                "{} feature specs for {} feature matrices",
                specs.len(),
                matrices.len()
            )));
        }
        for (spec, m) in specs.iter().zip(&matrices) {
            if let Some(v) = m.values().iter().find(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("feature {} has non-finite value {v}", spec.name)));
            }
        }
        Ok(FeatureTensor { specs, matrices })
    }

    /// Builds from per-transition rows `(from, to, [f_1..f_T])`.
    pub fn from_rows(n_states: usize, specs: Vec<FeatureSpec>, rows: &[(usize, usize, Vec<f64>)]) -> Result<Self> {
        let t = specs.len();
        let mut trip: Vec<Vec<(usize, usize, f64)>> = vec![Vec::with_capacity(rows.len()); t];
        for (from, to, vals) in rows {
            if vals.len() != t {
                return Err(Error::invalid(format!(
                    "transition ({from}, {to}) has {} feature values, expected {t}",
                    vals.len()
                )));
            }
            if *from >= n_states || *to >= n_states {
                return Err(Error::invalid(format!("transition ({from}, {to}) outside 0..{n_states}")));
            }
            for (k, &v) in vals.iter().enumerate() {
                if v != 0.0 {
                    trip[k].push((*from, *to, v));
                }
            }
        }
        let matrices = trip
            .iter()
            .map(|tr| CsrMatrix::from_triplets(n_states, n_states, tr))
            .collect();
        FeatureTensor::new(specs, matrices)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn matrix(&self, t: usize) -> &CsrMatrix {
        &self.matrices[t]
    }
}

/// Reward parameters, one weight per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Theta(pub Vec<f64>);

impl Theta {
    pub fn zeros(len: usize) -> Self {
        Theta(vec![0.0; len])
    }

    /// Parses a comma- or whitespace-separated list of numbers.
    pub fn parse(text: &str) -> Result<Self> {
        let values = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|tok| !tok.is_empty())
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("cannot parse theta component {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Theta(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for Theta {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Sorted set of zero-reward absorbing states for one destination group.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DestinationSet(Vec<StateId>);

impl DestinationSet {
    pub fn new(states: impl IntoIterator<Item = StateId>) -> Self {
        let mut v: Vec<StateId> = states.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        DestinationSet(v)
    }

    pub fn single(s: StateId) -> Self {
        DestinationSet(vec![s])
    }

    pub fn contains(&self, s: StateId) -> bool {
        self.0.binary_search(&s).is_ok()
    }

    pub fn states(&self) -> &[StateId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Result of the row-sum invertibility check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowSumCheck {
    pub holds: bool,
    /// Largest row sum of `M`; the value-iteration contraction factor.
    pub tau: f64,
}

/// An undiscounted MDP with linear-in-parameters rewards `r(s'|s) = θ·f(s'|s)`.
#[derive(Debug)]
pub struct Mdp {
    kernel: TransitionKernel,
    features: FeatureTensor,
    /// `Σ_a p(s'|a,s)` on the transition support.
    support: CsrMatrix,
    /// Feature values at every support position, `T` per position.
    support_features: Vec<f64>,
    /// Support position of every kernel entry.
    entry_position: Vec<usize>,
    order: OnceLock<Vec<usize>>,
    /// Transpose of `support`, built on first use.
    predecessors: OnceLock<CsrMatrix>,
    factor_cache: SymbolicCache,
}

impl Clone for Mdp {
    fn clone(&self) -> Self {
        Mdp {
            kernel: self.kernel.clone(),
            features: self.features.clone(),
            support: self.support.clone(),
            support_features: self.support_features.clone(),
            entry_position: self.entry_position.clone(),
            order: OnceLock::new(),
            predecessors: OnceLock::new(),
            factor_cache: SymbolicCache::default(),
        }
    }
}

impl Mdp {
    pub fn new(kernel: TransitionKernel, features: FeatureTensor) -> Result<Self> {
        let n = kernel.n_states();
        for t in 0..features.len() {
            let m = features.matrix(t);
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::invalid(format!(
                    "feature matrix {} is {}x{}, expected {n}x{n}",
                    features.specs()[t].name,
                    m.nrows(),
                    m.ncols()
                )));
            }
        }

        let mut trip = Vec::with_capacity(kernel.entry_count());
        for s in 0..n {
            for g in kernel.action_range(StateId(s)) {
                let (succ, prob) = kernel.outcomes(g);
                trip.extend(succ.iter().zip(prob).map(|(&t, &p)| (s, t, p)));
            }
        }
        let support = CsrMatrix::from_triplets(n, n, &trip);

        let mut entry_position = Vec::with_capacity(kernel.entry_count());
        for s in 0..n {
            for g in kernel.action_range(StateId(s)) {
                for &t in kernel.outcomes(g).0 {
                    entry_position.push(support.position(s, t).expect("support contains every kernel entry"));
                }
            }
        }

        let tdim = features.len();
        let mut support_features = vec![0.0; support.nnz() * tdim];
        for s in 0..n {
            let (cols, _) = support.row(s);
            for (k, &c) in cols.iter().enumerate() {
                let pos = support.indptr()[s] + k;
                for t in 0..tdim {
                    support_features[pos * tdim + t] = features.matrix(t).get(s, c);
                }
            }
        }

        Ok(Mdp {
            kernel,
            features,
            support,
            support_features,
            entry_position,
            order: OnceLock::new(),
            predecessors: OnceLock::new(),
            factor_cache: SymbolicCache::default(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.kernel.n_states()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    pub fn features(&self) -> &FeatureTensor {
        &self.features
    }

    /// Pattern of possible transitions with values `Σ_a p(s'|a,s)`.
    pub fn support(&self) -> &CsrMatrix {
        &self.support
    }

    /// Feature vector at support position `pos`.
    pub fn features_at(&self, pos: usize) -> &[f64] {
        let t = self.n_features();
        &self.support_features[pos * t..(pos + 1) * t]
    }

    /// Root-mean-square of each feature over all possible transitions, with
    /// 1 standing in for features that are identically zero.
    pub fn feature_scale(&self) -> Vec<f64> {
        let t = self.n_features();
        let n = self.support_features.len() / t.max(1);
        (0..t)
            .map(|k| {
                let ms = (0..n).map(|p| self.support_features[p * t + k].powi(2)).sum::<f64>() / n.max(1) as f64;
                if ms > 0.0 { ms.sqrt() } else { 1.0 }
            })
            .collect()
    }

    pub(crate) fn entry_position(&self, entry: usize) -> usize {
        self.entry_position[entry]
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_features() {
            return Err(Error::invalid(format!(
                "theta has {} components but the MDP has {} features",
                theta.len(),
                self.n_features()
            )));
        }
        if let Some(v) = theta.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("theta component {v} is not finite")));
        }
        Ok(())
    }

    pub fn check_state(&self, s: StateId) -> Result<()> {
        if s.0 >= self.n_states() {
            return Err(Error::invalid(format!("state {s} outside 0..{}", self.n_states())));
        }
        Ok(())
    }

    /// `r(s2|s, θ) = θ · f(s2|s)`.
    pub fn reward(&self, s: StateId, s2: StateId, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        let pos = (s.0 < self.n_states())
            .then(|| self.support.position(s.0, s2.0))
            .flatten()
            .ok_or(Error::UnknownTransition { from: s.0, to: s2.0 })?;
        Ok(dot(theta, self.features_at(pos)))
    }

    /// `exp(r)` at every support position.
    pub fn exp_rewards(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let n = self.n_states();
        let mut out = Vec::with_capacity(self.support.nnz());
        for s in 0..n {
            let (cols, _) = self.support.row(s);
            for (k, &c) in cols.iter().enumerate() {
                let pos = self.support.indptr()[s] + k;
                let r = dot(theta, self.features_at(pos));
                let w = r.exp();
                if !w.is_finite() {
                    return Err(Error::RewardOverflow { from: s, to: c, reward: r });
                }
                out.push(w);
            }
        }
        Ok(out)
    }

    /// `M_{s,s'} = Σ_a p(s'|a,s) exp(r(s'|s,θ))` with the rows of `absorbing` emptied.
    pub fn build_m(&self, theta: &[f64], absorbing: &[StateId]) -> Result<CsrMatrix> {
        let w = self.exp_rewards(theta)?;
        let values = self.support.values().iter().zip(&w).map(|(p, e)| p * e).collect();
        let m = self.support.with_values(values);
        if absorbing.is_empty() {
            Ok(m)
        } else {
            for &s in absorbing {
                self.check_state(s)?;
            }
            let rows: Vec<usize> = absorbing.iter().map(|s| s.0).collect();
            Ok(m.without_rows(&rows))
        }
    }

    /// True iff the transition graph is acyclic (every cyclic state sequence
    /// has a zero-probability step). Independent of θ.
    pub fn check_condition_i(&self) -> bool {
        is_acyclic(&self.support)
    }

    /// Row sums of `M` (no rows emptied) against 1.
    pub fn check_condition_ii(&self, theta: &[f64]) -> Result<RowSumCheck> {
        Ok(row_sum_check(&self.build_m(theta, &[])?))
    }

    /// Fill-reducing elimination order for `I - M`, computed once per MDP.
    /// It only depends on the support pattern, so it also serves `I - M^T`.
    pub fn elimination_order(&self) -> &[usize] {
        self.order.get_or_init(|| minimum_degree(&self.support))
    }

    /// States from which some state of `targets` can be reached along the
    /// transition support, the targets included.
    pub fn can_reach(&self, targets: &[StateId]) -> Vec<bool> {
        let rev = self.predecessors.get_or_init(|| self.support.transpose());
        let mut seen = vec![false; self.n_states()];
        let mut queue = VecDeque::new();
        for &t in targets {
            if !seen[t.0] {
                seen[t.0] = true;
                queue.push_back(t.0);
            }
        }
        while let Some(s) = queue.pop_front() {
            for &p in rev.row(s).0 {
                if !seen[p] {
                    seen[p] = true;
                    queue.push_back(p);
                }
            }
        }
        seen
    }

    /// Factorizes a matrix built on this MDP (`I - M`, a reach system, ...),
    /// reusing the symbolic work of earlier matrices with the same pattern.
    pub fn factorize(&self, a: &CsrMatrix, order: Option<&[usize]>) -> Result<LuFactors> {
        self.factor_cache.factorize(a, order)
    }
}

pub fn row_sum_check(m: &CsrMatrix) -> RowSumCheck {
    let tau = m.max_row_sum();
    RowSumCheck { holds: tau < 1.0, tau }
}

/// Kahn's algorithm on the stored pattern; self-loops count as cycles.
pub fn is_acyclic(pattern: &CsrMatrix) -> bool {
    let n = pattern.nrows();
    let mut indeg = vec![0usize; n];
    for r in 0..n {
        let (cols, vals) = pattern.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            if v != 0.0 {
                indeg[c] += 1;
            }
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&s| indeg[s] == 0).collect();
    let mut seen = 0;
    while let Some(s) = queue.pop_front() {
        seen += 1;
        let (cols, vals) = pattern.row(s);
        for (&c, &v) in cols.iter().zip(vals) {
            if v != 0.0 {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
    }
    seen == n
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
