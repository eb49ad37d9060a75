//! Small fixtures shared by unit tests.

use crate::mdp::{FeatureKind, FeatureSpec, FeatureTensor, Mdp, TransitionKernel};

/// Deterministic MDP with one feature whose value per edge is given.
pub fn weighted_mdp(n: usize, edges: &[(usize, usize, f64)]) -> Mdp {
    let pairs: Vec<_> = edges.iter().map(|&(a, b, _)| (a, b)).collect();
    let kernel = TransitionKernel::deterministic(n, &pairs).unwrap();
    let rows: Vec<_> = edges.iter().map(|&(a, b, f)| (a, b, vec![f])).collect();
    let spec = FeatureSpec { name: "cost".into(), kind: FeatureKind::Real };
    Mdp::new(kernel, FeatureTensor::from_rows(n, vec![spec], &rows).unwrap()).unwrap()
}

/// Every edge carries incidence 1.
pub fn unit_mdp(n: usize, edges: &[(usize, usize)]) -> Mdp {
    let e: Vec<_> = edges.iter().map(|&(a, b)| (a, b, 1.0)).collect();
    weighted_mdp(n, &e)
}

/// 0 → {1, 2} → 3.
pub fn diamond() -> Mdp {
    unit_mdp(4, &[(0, 1), (0, 2), (1, 3), (2, 3)])
}

/// Diamond where the edge 0 → 2 costs twice as much; with θ = -1 the
/// rewards are r(1|0) = -1, r(2|0) = -2 and -1 on both arms.
pub fn asymmetric_diamond() -> Mdp {
    weighted_mdp(4, &[(0, 1, 1.0), (0, 2, 2.0), (1, 3, 1.0), (2, 3, 1.0)])
}

/// 0 → 1 → 2.
pub fn chain() -> Mdp {
    unit_mdp(3, &[(0, 1), (1, 2)])
}
