//! Per-thread instrumentation of the linear-algebra work.
//!
//! Every sparse factorization and every batched triangular solve bumps a
//! counter here, so callers can verify how many linear systems a likelihood
//! evaluation actually solved and how long the factorizations took.

use std::cell::Cell;
use std::time::Duration;

thread_local! {
    static FACTORIZATIONS: Cell<usize> = const { Cell::new(0) };
    static SOLVE_BATCHES: Cell<usize> = const { Cell::new(0) };
    static SOLVE_COLUMNS: Cell<usize> = const { Cell::new(0) };
    static FACTOR_NANOS: Cell<u128> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub factorizations: usize,
    /// One batch is one call solving `A X = B` for a (possibly multi-column) B.
    pub solve_batches: usize,
    pub solve_columns: usize,
    pub factorization_time: Duration,
}

impl SolverStats {
    pub fn since(&self, earlier: &SolverStats) -> SolverStats {
        SolverStats {
            factorizations: self.factorizations - earlier.factorizations,
            solve_batches: self.solve_batches - earlier.solve_batches,
            solve_columns: self.solve_columns - earlier.solve_columns,
            factorization_time: self.factorization_time.saturating_sub(earlier.factorization_time),
        }
    }
}

pub fn snapshot() -> SolverStats {
    SolverStats {
        factorizations: FACTORIZATIONS.with(Cell::get),
        solve_batches: SOLVE_BATCHES.with(Cell::get),
        solve_columns: SOLVE_COLUMNS.with(Cell::get),
        factorization_time: Duration::from_nanos(FACTOR_NANOS.with(Cell::get) as u64),
    }
}

pub fn reset() {
    FACTORIZATIONS.with(|c| c.set(0));
    SOLVE_BATCHES.with(|c| c.set(0));
    SOLVE_COLUMNS.with(|c| c.set(0));
    FACTOR_NANOS.with(|c| c.set(0));
}

/// Runs `f` and returns its result together with the work it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, SolverStats) {
    let before = snapshot();
    let out = f();
    (out, snapshot().since(&before))
}

pub(crate) fn record_factorization(elapsed: Duration) {
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
    FACTOR_NANOS.with(|c| c.set(c.get() + elapsed.as_nanos()));
}

pub(crate) fn record_solve(columns: usize) {
    SOLVE_BATCHES.with(|c| c.set(c.get() + 1));
    SOLVE_COLUMNS.with(|c| c.set(c.get() + columns));
}
