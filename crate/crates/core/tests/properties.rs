mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::Rng;

use irlc::datagen::{apply_missing, random_cyclic_mdp, random_od_pairs, rng_from_seed, sample_trajectories};
use irlc::em::{bfs_paths, em_train, enumerate_gaps, e_step};
use irlc::forward::solve_forward;
use irlc::likelihood::{policy_row_sum, GroupPolicy};
use irlc::mdp::{DestinationSet, Mdp, StateId};
use irlc::missing::{build_d, build_q0, reach_order, solve_reach};
use irlc::optim::OptimizerConfig;
use irlc::sparse::{CsrMatrix, LuFactors};
use irlc::trainer::{objective, train, Mode, TrainConfig};
use irlc::trajectory::{MissingPair, Segment, Trajectory};

use common::{acyclic_instance, all_paths, edge_weights, inf_norm, path_probability, successors};

fn config() -> ProptestConfig {
    ProptestConfig { cases: 48, ..ProptestConfig::default() }
}

/// Cyclic instance with θ scaled until every row of `M` sums below one.
fn contracting_instance(seed: u64) -> (Mdp, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    let n = rng.random_range(4..=20);
    let mdp = random_cyclic_mdp(n, 2, 0.3, &mut rng).unwrap();
    let mut theta: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..-0.2)).collect();
    while !mdp.check_condition_ii(&theta).unwrap().holds {
        theta.iter_mut().for_each(|t| *t *= 1.5);
    }
    (mdp, theta)
}

fn instance(seed: u64, cyclic: bool) -> (Mdp, Vec<f64>) {
    if cyclic {
        contracting_instance(seed)
    } else {
        acyclic_instance(seed)
    }
}

fn destination(mdp: &Mdp, seed: u64) -> usize {
    rng_from_seed(seed.wrapping_add(7)).random_range(1..mdp.n_states())
}

fn z_for(mdp: &Mdp, theta: &[f64], dest: usize) -> Vec<f64> {
    solve_forward(mdp, theta, &[DestinationSet::single(StateId(dest))], false).unwrap().z_column(0)
}

fn policy_for(mdp: &Mdp, theta: &[f64], dest: usize) -> GroupPolicy {
    let group = DestinationSet::single(StateId(dest));
    let sol = solve_forward(mdp, theta, std::slice::from_ref(&group), false).unwrap();
    GroupPolicy::from_solution(mdp, theta, &sol, 0, &group).unwrap()
}

fn dense_m(mdp: &Mdp, theta: &[f64]) -> Vec<Vec<f64>> {
    let n = mdp.n_states();
    (0..n)
        .map(|s| {
            let mut row = vec![0.0; n];
            for (to, w) in edge_weights(mdp, theta, s) {
                row[to] += w;
            }
            row
        })
        .collect()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn m_matches_dense_reference(seed in any::<u64>(), cyclic in any::<bool>()) {
        let (mdp, theta) = instance(seed, cyclic);
        let m = mdp.build_m(&theta, &[]).unwrap();
        let reference = dense_m(&mdp, &theta);
        for (s, row) in reference.iter().enumerate() {
            for (t, &v) in row.iter().enumerate() {
                prop_assert!((m.get(s, t) - v).abs() <= 1e-14 * v.abs().max(1.0));
            }
            let sum: f64 = row.iter().sum();
            prop_assert!((m.row_sums()[s] - sum).abs() <= 1e-13 * sum.max(1.0));
        }
    }

    #[test]
    fn powers_of_acyclic_m_vanish(seed in any::<u64>()) {
        let (mdp, theta) = acyclic_instance(seed);
        prop_assert!(mdp.check_condition_i());
        let m = mdp.build_m(&theta, &[]).unwrap();
        let mut power = m.clone();
        for _ in 1..mdp.n_states() {
            power = power.matmul(&m);
        }
        prop_assert!(power.is_zero());
    }

    #[test]
    fn forward_solution_is_a_nonnegative_fixed_point(seed in any::<u64>(), cyclic in any::<bool>()) {
        let (mdp, theta) = instance(seed, cyclic);
        let dest = destination(&mdp, seed);
        let z = z_for(&mdp, &theta, dest);
        let m = mdp.build_m(&theta, &[StateId(dest)]).unwrap();
        let mz = m.mul_vec(&z);
        let residual = inf_norm((0..z.len()).map(|s| z[s] - mz[s] - if s == dest { 1.0 } else { 0.0 }));
        prop_assert!(residual <= 2e-10, "residual {residual:e}");
        prop_assert!(z.iter().all(|&v| v >= 0.0));
        prop_assert_eq!(z[dest], 1.0);
    }

    #[test]
    fn value_iteration_contracts_towards_the_fixed_point(seed in any::<u64>()) {
        let (mdp, theta) = contracting_instance(seed);
        let tau = mdp.check_condition_ii(&theta).unwrap().tau;
        let dest = destination(&mdp, seed);
        let z_star = z_for(&mdp, &theta, dest);
        let m = mdp.build_m(&theta, &[StateId(dest)]).unwrap();
        let mut rng = rng_from_seed(seed);
        let mut z: Vec<f64> = (0..mdp.n_states()).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut err = inf_norm(z.iter().zip(&z_star).map(|(a, b)| a - b));
        for _ in 0..30 {
            z = m.mul_vec(&z);
            z[dest] += 1.0;
            let next = inf_norm(z.iter().zip(&z_star).map(|(a, b)| a - b));
            prop_assert!(next <= tau * err + 1e-14, "{next:e} > {tau} * {err:e}");
            err = next;
        }
    }

    #[test]
    fn lu_reproduces_the_permuted_matrix(seed in any::<u64>(), cyclic in any::<bool>()) {
        let (mdp, theta) = instance(seed, cyclic);
        let a = mdp.build_m(&theta, &[]).unwrap().identity_minus();
        let factors = LuFactors::factorize(&a, Some(mdp.elimination_order())).unwrap();
        let (l, u) = factors.dense_factors();
        let pa = factors.permuted(&a);
        let scale = pa.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = (&l.dot(&u) - &pa).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(diff <= 1e-12 * scale, "‖LU - PAQ‖ = {diff:e}");
    }

    #[test]
    fn policies_are_normalized(seed in any::<u64>(), cyclic in any::<bool>()) {
        let (mdp, theta) = instance(seed, cyclic);
        let dest = destination(&mdp, seed);
        let policy = policy_for(&mdp, &theta, dest);
        for s in (0..mdp.n_states()).filter(|&s| policy.is_defined(StateId(s))) {
            let sum = policy_row_sum(&mdp, &policy, StateId(s));
            prop_assert!((sum - 1.0).abs() <= 1e-10, "state {s}: {sum}");
        }
    }

    #[test]
    fn path_probabilities_follow_the_reward_measure(seed in any::<u64>(), theta in prop::array::uniform2(-1.5f64..0.5)) {
        // deterministic kernel: one action per successor
        let mdp = common::layered_instance(seed);
        let dest = destination(&mdp, seed);
        let z = z_for(&mdp, &theta, dest);
        let policy = policy_for(&mdp, &theta, dest);
        let weights: Vec<_> = (0..mdp.n_states()).map(|s| edge_weights(&mdp, &theta, s)).collect();
        for origin in (0..mdp.n_states()).filter(|&s| s != dest && z[s] > 0.0) {
            for path in all_paths(&mdp, origin, dest) {
                let measure: f64 = path.windows(2).map(|w| weights[w[0]][&w[1]]).product::<f64>() / z[origin];
                let p = path_probability(&mdp, &policy, &path);
                prop_assert!((p - measure).abs() <= 1e-10, "path {path:?}: {p} vs {measure}");
            }
        }
    }

    #[test]
    fn q0_is_sub_stochastic(seed in any::<u64>(), cyclic in any::<bool>()) {
        let (mdp, theta) = instance(seed, cyclic);
        let n = mdp.n_states();
        let dest = destination(&mdp, seed);
        let policy = policy_for(&mdp, &theta, dest);
        let pm = build_q0(&mdp, &policy).unwrap();
        let qt: CsrMatrix = pm.q0.transpose();
        let sums = qt.row_sums();
        prop_assert!(sums.iter().all(|&s| s <= 1.0 + 1e-12));
        for (s, &sum) in sums.iter().enumerate().take(n) {
            let expected = if policy.is_defined(StateId(s)) { 1.0 } else { 0.0 };
            prop_assert!((sum - expected).abs() <= 1e-12, "state {s}: {sum}");
        }
        prop_assert_eq!(sums[n], 0.0);
    }

    #[test]
    fn reach_probabilities_bound_single_paths(seed in any::<u64>()) {
        let (mdp, theta) = acyclic_instance(seed);
        let n = mdp.n_states();
        let dest = destination(&mdp, seed);
        let policy = policy_for(&mdp, &theta, dest);
        let pairs: Vec<MissingPair> = (0..n)
            .filter(|&u| policy.is_defined(StateId(u)))
            .flat_map(|u| (0..n).filter(move |&v| v != u).map(move |v| MissingPair { u: StateId(u), v: StateId(v), group: 0 }))
            .collect();
        prop_assume!(!pairs.is_empty());
        let pm = build_q0(&mdp, &policy).unwrap();
        let d = build_d(n, &pairs);
        let sol = solve_reach(&pm, &d, Some(&reach_order(&mdp)), false).unwrap();
        let qp = pm.q0.mul_dense(sol.pi.view());
        let residual = (&sol.pi - &qp - &d).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(residual <= 1e-10);
        for (k, pair) in pairs.iter().enumerate() {
            let p = sol.reach_probability(k, pair.v);
            prop_assert!((-1e-10..=1.0 + 1e-10).contains(&p), "{pair:?}: {p}");
            for path in all_paths(&mdp, pair.u.0, pair.v.0) {
                prop_assert!(p >= path_probability(&mdp, &policy, &path) - 1e-15);
            }
        }
    }

    #[test]
    fn exhaustive_search_finds_every_path(seed in any::<u64>()) {
        let (mdp, _) = acyclic_instance(seed);
        let n = mdp.n_states();
        let mut rng = rng_from_seed(seed);
        for _ in 0..5 {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            prop_assume!(u != v);
            let found: BTreeSet<Vec<usize>> = bfs_paths(&mdp, StateId(u), StateId(v), n)
                .unwrap()
                .into_iter()
                .map(|p| p.into_iter().map(|s| s.0).collect())
                .collect();
            let expected: BTreeSet<Vec<usize>> = all_paths(&mdp, u, v).into_iter().collect();
            prop_assert_eq!(found, expected);
        }
    }

    #[test]
    fn masking_removes_one_interior_window(seed in any::<u64>(), p in 0.0f64..0.95) {
        let (mdp, theta) = acyclic_instance(seed);
        let od = random_od_pairs(&mdp, 20, 2, seed).unwrap();
        let full = sample_trajectories(&mdp, &theta, &od, seed).unwrap();
        let masked = apply_missing(&full, p, seed).unwrap();
        for (t, m) in full.iter().zip(&masked) {
            let states = t.states().unwrap();
            prop_assert_eq!((m.origin, m.dest), (t.origin, t.dest));
            let gaps: Vec<_> = m.gaps().collect();
            prop_assert!(gaps.len() <= 1);
            if let Some(&(u, v)) = gaps.first() {
                let i = states.iter().position(|&s| s == u).unwrap();
                let j = states.iter().position(|&s| s == v).unwrap();
                prop_assert!(i < j && j - i >= 2 && j < states.len());
                let mut kept = states[..=i].to_vec();
                kept.extend_from_slice(&states[j..]);
                let observed: Vec<StateId> = m.steps().map(|s| s.state).chain([u]).collect();
                for s in &observed {
                    prop_assert!(kept.contains(s));
                }
                prop_assert_eq!(m.observed_state_count(), kept.len());
            } else {
                prop_assert_eq!(m, t);
            }
        }
    }

    #[test]
    fn em_weights_and_surrogate(seed in 0u64..1000) {
        let (mdp, theta) = acyclic_instance(seed);
        let od = random_od_pairs(&mdp, 30, 2, seed).unwrap();
        let full = sample_trajectories(&mdp, &theta, &od, seed).unwrap();
        let masked = apply_missing(&full, 0.6, seed).unwrap();
        let mut sets = enumerate_gaps(&mdp, &masked, mdp.n_states()).unwrap();
        e_step(&mdp, &masked, &mut sets, &theta).unwrap();
        for set in sets.iter().filter(|s| !s.is_omitted()) {
            prop_assert!(set.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((set.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for path in &set.paths {
                prop_assert_eq!(path.first(), Some(&set.u));
                prop_assert_eq!(path.last(), Some(&set.v));
                for w in path.windows(2) {
                    prop_assert!(successors(&mdp, w[0].0).contains(&w[1].0));
                }
            }
        }
        let res = em_train(&mdp, &masked, mdp.n_states(), 20, &[0.0; 2], &OptimizerConfig::default()).unwrap();
        for it in &res.trace {
            prop_assert!(it.surrogate_after >= it.surrogate_before - 1e-8);
        }
    }

    #[test]
    fn training_never_descends(seed in 0u64..1000, mode in prop_oneof![Just(Mode::Composition), Just(Mode::Connected)]) {
        let (mdp, theta) = acyclic_instance(seed);
        let od = random_od_pairs(&mdp, 30, 2, seed).unwrap();
        let full = sample_trajectories(&mdp, &theta, &od, seed).unwrap();
        let masked = apply_missing(&full, 0.5, seed).unwrap();
        let report = train(&masked, &mdp, &TrainConfig::new(mode, irlc::mdp::Theta(vec![0.0; 2]))).unwrap();
        for w in report.trace.windows(2) {
            prop_assert!(w[1].loglik >= w[0].loglik - 1e-12, "{} after {}", w[1].loglik, w[0].loglik);
        }
    }

    #[test]
    fn composition_equals_full_without_gaps(seed in any::<u64>(), shift in -1.0f64..1.0) {
        let (mdp, theta) = acyclic_instance(seed);
        let od = random_od_pairs(&mdp, 30, 2, seed).unwrap();
        let full = sample_trajectories(&mdp, &theta, &od, seed).unwrap();
        let unmasked = apply_missing(&full, 0.0, seed).unwrap();
        let at: Vec<f64> = theta.iter().map(|t| t + shift).collect();
        let a = objective(Mode::Full, &full, &mdp, &at).unwrap();
        let b = objective(Mode::Composition, &unmasked, &mdp, &at).unwrap();
        prop_assert_eq!(a.value, b.value);
        for (x, y) in a.grad.iter().zip(&b.grad) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

/// Every complete path of a small layered instance appears about as often
/// as its probability under the sampling policy.
#[test]
fn sampled_path_frequencies_match_policy() {
    let mdp = common::layered_instance(3);
    let n = mdp.n_states();
    let theta = [-0.7, 0.4];
    let origin = 0;
    let dest = (0..n).rev().find(|&d| all_paths(&mdp, origin, d).len() >= 3).expect("a destination with several paths");
    let paths = all_paths(&mdp, origin, dest);
    assert!(paths.len() <= 10);
    let draws = 5000;
    let od = vec![(StateId(origin), StateId(dest)); draws];
    let sampled = sample_trajectories(&mdp, &theta, &od, 17).unwrap();
    let policy = policy_for(&mdp, &theta, dest);
    for path in &paths {
        let p = path_probability(&mdp, &policy, path);
        let count = sampled
            .iter()
            .filter(|t| t.states().unwrap().iter().map(|s| s.0).eq(path.iter().copied()))
            .count() as f64;
        let mean = draws as f64 * p;
        let sd = (mean * (1.0 - p)).sqrt();
        assert!((count - mean).abs() <= 3.0 * sd + 1.0, "path {path:?}: {count} draws, expected {mean:.1} ± {sd:.1}");
    }
    let total: f64 = paths.iter().map(|p| path_probability(&mdp, &policy, p)).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

/// A gap at the very start and another at the destination are both scored.
#[test]
fn gaps_may_end_at_the_destination() {
    let (mdp, theta) = acyclic_instance(4);
    let od = random_od_pairs(&mdp, 40, 1, 4).unwrap();
    let full = sample_trajectories(&mdp, &theta, &od, 4).unwrap();
    let t = full.iter().find(|t| t.observed_state_count() >= 3).expect("a trajectory with an interior state");
    let states = t.states().unwrap();
    let gapped = Trajectory { origin: t.origin, dest: t.dest, segments: vec![Segment::Gap { u: states[0], v: t.dest }] };
    let ll = irlc::missing::incomplete_dataset_loglik(&[gapped], &mdp, &theta).unwrap();
    // origin to destination is certain under the destination's own policy
    assert!(ll.value.abs() < 1e-12, "{}", ll.value);
}
