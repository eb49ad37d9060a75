use std::collections::BTreeSet;

use super::CsrMatrix;

/// Minimum-degree ordering of the symmetrized pattern of a square matrix.
///
/// Plain (non-approximate) minimum degree on an explicit elimination graph,
/// ties broken by the lower index so the result is fully deterministic.
/// Returns `order` with `order[k]` = original index eliminated at step `k`.
pub fn minimum_degree(pattern: &CsrMatrix) -> Vec<usize> {
    let n = pattern.nrows();
    assert_eq!(n, pattern.ncols());
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..n {
        for &c in pattern.row(r).0 {
            if c != r {
                adj[r].push(c);
                adj[c].push(r);
            }
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }

    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while let Some((_, v)) = queue.pop_first() {
        eliminated[v] = true;
        order.push(v);
        let clique = std::mem::take(&mut adj[v]);
        for &u in &clique {
            queue.remove(&(adj[u].len(), u));
            let merged = merge_without(&adj[u], &clique, u, v);
            adj[u] = merged;
            queue.insert((adj[u].len(), u));
        }
    }
    debug_assert!(eliminated.iter().all(|&e| e));
    order
}

/// Sorted union of `a` and `b`, dropping `skip_a` and `skip_b`.
fn merge_without(a: &[usize], b: &[usize], skip_a: usize, skip_b: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x == y => {
                i += 1;
                j += 1;
                x
            }
            (Some(&x), Some(&y)) if x < y => {
                i += 1;
                x
            }
            (Some(_), Some(&y)) => {
                j += 1;
                y
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        if next != skip_a && next != skip_b {
            out.push(next);
        }
    }
    out
}
