//! Synthetic networks, trajectory sampling and missing-segment masking.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::forward::solve_forward;
use crate::likelihood::GroupPolicy;
use crate::mdp::{DestinationSet, FeatureKind, FeatureSpec, FeatureTensor, Mdp, StateId, TransitionKernel};
use crate::trajectory::{ObservedStep, Segment, Trajectory};

pub const MIN_TRAVEL_TIME: f64 = 10.0;
pub const MAX_TRAVEL_TIME: f64 = 120.0;
/// Resampling attempts allowed per trajectory before giving up.
pub const MAX_CAP_HITS: usize = 100;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A rows × cols grid of intersections whose directed links are the states.
#[derive(Debug, Clone, PartialEq)]
pub struct GridNetwork {
    pub rows: usize,
    pub cols: usize,
    /// `(from_node, to_node)` per link; node `r * cols + c` sits at row `r`, column `c`.
    pub links: Vec<(usize, usize)>,
    /// Travel time of each link in seconds.
    pub travel_time: Vec<f64>,
}

impl GridNetwork {
    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    fn position(&self, node: usize) -> (i64, i64) {
        // x east, y north
        ((node % self.cols) as i64, -((node / self.cols) as i64))
    }

    /// `(left_turn, u_turn)` for moving from link `a` onto link `b`.
    pub fn turn(&self, a: usize, b: usize) -> (bool, bool) {
        let (p0, p1) = (self.position(self.links[a].0), self.position(self.links[a].1));
        let p2 = self.position(self.links[b].1);
        let d1 = (p1.0 - p0.0, p1.1 - p0.1);
        let d2 = (p2.0 - p1.0, p2.1 - p1.1);
        let u_turn = d2 == (-d1.0, -d1.1);
        let cross = d1.0 * d2.1 - d1.1 * d2.0;
        (cross > 0, u_turn)
    }
}

pub fn grid_feature_specs() -> Vec<FeatureSpec> {
    vec![
        FeatureSpec { name: "left_turn".into(), kind: FeatureKind::Boolean },
        FeatureSpec { name: "u_turn".into(), kind: FeatureKind::Boolean },
        FeatureSpec { name: "incidence".into(), kind: FeatureKind::Boolean },
        FeatureSpec { name: "travel_time".into(), kind: FeatureKind::Real },
    ]
}

/// Grid road network. Link `a → b` continues onto every link leaving `b`,
/// U-turns included, so the transition graph is cyclic. The travel-time
/// feature of a transition is the travel time of the link entered.
pub fn gen_grid(rows: usize, cols: usize, seed: u64) -> Result<(GridNetwork, Mdp)> {
    if rows < 2 || cols < 2 {
        return Err(Error::invalid(format!("grid needs at least 2 rows and 2 columns, got {rows}x{cols}")));
    }
    let node = |r: usize, c: usize| r * cols + c;
    let mut links = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let mut nbrs = Vec::new();
            if r > 0 {
                nbrs.push(node(r - 1, c));
            }
            if c > 0 {
                nbrs.push(node(r, c - 1));
            }
            if c + 1 < cols {
                nbrs.push(node(r, c + 1));
            }
            if r + 1 < rows {
                nbrs.push(node(r + 1, c));
            }
            links.extend(nbrs.into_iter().map(|m| (node(r, c), m)));
        }
    }
    links.sort_unstable();
    let mut rng = rng_from_seed(seed);
    let travel_time: Vec<f64> = links.iter().map(|_| rng.random_range(MIN_TRAVEL_TIME..=MAX_TRAVEL_TIME)).collect();
    let net = GridNetwork { rows, cols, links, travel_time };

    let mut leaving: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &(from, _)) in net.links.iter().enumerate() {
        leaving.entry(from).or_default().push(i);
    }
    let mut edges = Vec::new();
    let mut rows_f = Vec::new();
    for (a, &(_, mid)) in net.links.iter().enumerate() {
        for &b in &leaving[&mid] {
            let (left, u) = net.turn(a, b);
            edges.push((a, b));
            rows_f.push((a, b, vec![left as u8 as f64, u as u8 as f64, 1.0, net.travel_time[b]]));
        }
    }
    let n = net.n_links();
    let kernel = TransitionKernel::deterministic(n, &edges)?;
    let features = FeatureTensor::from_rows(n, grid_feature_specs(), &rows_f)?;
    Ok((net, Mdp::new(kernel, features)?))
}

/// Random MDP on a topologically ordered state set (edges only go from lower
/// to higher index, so the support is acyclic). Every state but the last has
/// at least one outgoing transition; the last state is a sink. With
/// `stochastic_share > 0` some actions split between two successors.
pub fn random_acyclic_mdp(
    n_states: usize,
    n_features: usize,
    edge_prob: f64,
    stochastic_share: f64,
    rng: &mut impl Rng,
) -> Result<Mdp> {
    if n_states < 2 {
        return Err(Error::invalid("random instance needs at least 2 states"));
    }
    let mut targets: Vec<Vec<usize>> = vec![Vec::new(); n_states];
    for (i, t) in targets.iter_mut().enumerate().take(n_states - 1) {
        t.extend((i + 1..n_states).filter(|_| rng.random_bool(edge_prob)));
        if t.is_empty() {
            t.push(rng.random_range(i + 1..n_states));
        }
    }
    random_mdp_from_targets(targets, n_features, stochastic_share, rng)
}

/// Random MDP whose support may contain cycles (self-loops excluded).
/// The last state is a sink; every other state has an outgoing transition.
pub fn random_cyclic_mdp(n_states: usize, n_features: usize, edge_prob: f64, rng: &mut impl Rng) -> Result<Mdp> {
    if n_states < 2 {
        return Err(Error::invalid("random instance needs at least 2 states"));
    }
    let mut targets: Vec<Vec<usize>> = vec![Vec::new(); n_states];
    for (i, t) in targets.iter_mut().enumerate().take(n_states - 1) {
        t.extend((0..n_states).filter(|&j| j != i && rng.random_bool(edge_prob)));
        if t.is_empty() {
            t.push(rng.random_range(i + 1..n_states));
        }
    }
    random_mdp_from_targets(targets, n_features, 0.0, rng)
}

fn random_mdp_from_targets(
    targets: Vec<Vec<usize>>,
    n_features: usize,
    stochastic_share: f64,
    rng: &mut impl Rng,
) -> Result<Mdp> {
    let n = targets.len();
    let mut actions: Vec<Vec<Vec<(usize, f64)>>> = vec![Vec::new(); n];
    let mut rows = Vec::new();
    for (s, ts) in targets.iter().enumerate() {
        let mut k = 0;
        while k < ts.len() {
            if k + 1 < ts.len() && stochastic_share > 0.0 && rng.random_bool(stochastic_share) {
                let p = rng.random_range(0.2..0.8);
                actions[s].push(vec![(ts[k], p), (ts[k + 1], 1.0 - p)]);
                k += 2;
            } else {
                actions[s].push(vec![(ts[k], 1.0)]);
                k += 1;
            }
        }
        for &t in ts {
            rows.push((s, t, (0..n_features).map(|_| rng.random::<f64>()).collect::<Vec<_>>()));
        }
    }
    let specs = (0..n_features)
        .map(|t| FeatureSpec { name: format!("f{t}"), kind: FeatureKind::Real })
        .collect();
    let kernel = TransitionKernel::new(n, actions)?;
    Mdp::new(kernel, FeatureTensor::from_rows(n, specs, &rows)?)
}

/// States from which `dest` can be reached along the transition support.
pub fn can_reach(mdp: &Mdp, dest: StateId) -> Vec<bool> {
    mdp.can_reach(&[dest])
}

/// `n` origin-destination pairs: `n_dest` distinct destinations drawn
/// uniformly among the states with a predecessor, each pair's destination
/// uniform among them and its origin uniform among the other states that
/// can reach it.
pub fn random_od_pairs(mdp: &Mdp, n: usize, n_dest: usize, seed: u64) -> Result<Vec<(StateId, StateId)>> {
    let n_states = mdp.n_states();
    let rev = mdp.support().transpose();
    let candidates: Vec<usize> = (0..n_states).filter(|&s| rev.row(s).0.iter().any(|&p| p != s)).collect();
    if n_dest == 0 || n_dest > candidates.len() {
        return Err(Error::invalid(format!(
            "cannot draw {n_dest} destinations from {} states with a predecessor",
            candidates.len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut dests: Vec<usize> =
        index::sample(&mut rng, candidates.len(), n_dest).into_iter().map(|i| candidates[i]).collect();
    dests.sort_unstable();
    let origins: Vec<Vec<usize>> = dests
        .iter()
        .map(|&d| {
            let reach = can_reach(mdp, StateId(d));
            (0..n_states).filter(|&s| s != d && reach[s]).collect()
        })
        .collect();
    if let Some(k) = origins.iter().position(|o| o.is_empty()) {
        return Err(Error::invalid(format!("no state can reach destination {}", dests[k])));
    }
    Ok((0..n)
        .map(|_| {
            let k = rng.random_range(0..dests.len());
            let o = origins[k][rng.random_range(0..origins[k].len())];
            (StateId(o), StateId(dests[k]))
        })
        .collect())
}

/// Samples one trajectory per OD pair by walking the policy of θ from the
/// origin until the destination. Refuses θ for which neither invertibility
/// condition holds.
pub fn sample_trajectories(mdp: &Mdp, theta: &[f64], od_pairs: &[(StateId, StateId)], seed: u64) -> Result<Vec<Trajectory>> {
    let check = mdp.check_condition_ii(theta)?;
    if !check.holds && !mdp.check_condition_i() {
        return Err(Error::invalid(format!(
            "theta gives max row sum {:.4} >= 1 on a cyclic network; use more negative weights",
            check.tau
        )));
    }
    sample_trajectories_unchecked(mdp, theta, od_pairs, seed)
}

/// [`sample_trajectories`] without the invertibility check.
pub fn sample_trajectories_unchecked(
    mdp: &Mdp,
    theta: &[f64],
    od_pairs: &[(StateId, StateId)],
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut dests: Vec<StateId> = od_pairs.iter().map(|p| p.1).collect();
    dests.sort_unstable();
    dests.dedup();
    let groups: Vec<DestinationSet> = dests.iter().map(|&d| DestinationSet::single(d)).collect();
    if groups.is_empty() {
        return Ok(Vec::new());
    }
    let sol = solve_forward(mdp, theta, &groups, false)?;
    let policies = groups
        .iter()
        .enumerate()
        .map(|(i, g)| GroupPolicy::from_solution(mdp, theta, &sol, i, g))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = rng_from_seed(seed);
    let cap = 10 * mdp.n_states();
    od_pairs
        .iter()
        .map(|&(origin, dest)| {
            let policy = &policies[dests.binary_search(&dest).expect("destination listed")];
            if origin != dest && !policy.is_defined(origin) {
                return Err(Error::invalid(format!("origin {origin} cannot reach destination {dest}")));
            }
            for _ in 0..MAX_CAP_HITS {
                if let Some(steps) = walk(mdp, policy, origin, dest, cap, &mut rng) {
                    return Ok(Trajectory::complete(origin, dest, steps));
                }
            }
            Err(Error::SamplingCap { origin: origin.0, dest: dest.0, hits: MAX_CAP_HITS })
        })
        .collect()
}

fn walk(
    mdp: &Mdp,
    policy: &GroupPolicy,
    origin: StateId,
    dest: StateId,
    cap: usize,
    rng: &mut impl Rng,
) -> Option<Vec<ObservedStep>> {
    let kernel = mdp.kernel();
    let mut s = origin;
    let mut steps = Vec::new();
    while s != dest {
        if steps.len() >= cap {
            return None;
        }
        let range = kernel.action_range(s);
        let first = range.start;
        let g = pick(rng, range.clone().map(|g| policy.prob(g)))? + first;
        let (succ, prob) = kernel.outcomes(g);
        let next = succ[pick(rng, prob.iter().copied())?];
        steps.push(ObservedStep { state: s, action: crate::mdp::ActionId(g - first) });
        s = StateId(next);
    }
    Some(steps)
}

/// Index drawn from unnormalized weights; the last positive weight absorbs round-off.
fn pick(rng: &mut impl Rng, weights: impl Iterator<Item = f64> + Clone) -> Option<usize> {
    let total: f64 = weights.clone().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut x = rng.random::<f64>() * total;
    let mut last = None;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = Some(i);
            if x < w {
                return Some(i);
            }
            x -= w;
        }
    }
    last
}

/// Removes one window of consecutive interior states. The window length is
/// `Binomial(l - 2, p)` for a trajectory visiting `l` states and its position
/// is uniform over the windows whose bordering states differ; origin and
/// destination are always kept. A trajectory with no such window of the
/// drawn length stays complete.
pub fn mask_trajectory(traj: &Trajectory, p: f64, rng: &mut impl Rng) -> Result<Trajectory> {
    let states = traj.states()?;
    let l = states.len();
    if l < 3 {
        return Ok(traj.clone());
    }
    let missing = Binomial::new((l - 2) as u64, p)
        .map_err(|e| Error::invalid(format!("missing probability {p}: {e}")))?
        .sample(rng) as usize;
    if missing == 0 {
        return Ok(traj.clone());
    }
    // window covers states[start..start + missing], strictly inside
    let starts: Vec<usize> = (1..=l - 1 - missing).filter(|&i| states[i - 1] != states[i + missing]).collect();
    if starts.is_empty() {
        return Ok(traj.clone());
    }
    let start = starts[rng.random_range(0..starts.len())];
    let steps: Vec<ObservedStep> = traj.steps().copied().collect();
    let mut segments = Vec::new();
    if start >= 2 {
        segments.push(Segment::Observed(steps[..start - 1].to_vec()));
    }
    segments.push(Segment::Gap { u: states[start - 1], v: states[start + missing] });
    if start + missing < steps.len() {
        segments.push(Segment::Observed(steps[start + missing..].to_vec()));
    }
    Ok(Trajectory { origin: traj.origin, dest: traj.dest, segments })
}

/// Masks every trajectory of a dataset with missing probability `p`.
pub fn apply_missing(dataset: &[Trajectory], p: f64, seed: u64) -> Result<Vec<Trajectory>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("missing probability must be in [0, 1), got {p}")));
    }
    let mut rng = rng_from_seed(seed);
    dataset.iter().map(|t| mask_trajectory(t, p, &mut rng)).collect()
}

/// Number of removed states in a masked trajectory relative to its
/// complete length `l`.
pub fn missing_states(masked: &Trajectory, full_length: usize) -> usize {
    full_length - masked.observed_state_count()
}
