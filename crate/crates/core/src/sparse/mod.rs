//! Sparse matrix storage and direct solvers.

#![allow(clippy::needless_range_loop)]

mod csr;
mod lu;
mod ordering;

pub use csr::CsrMatrix;
pub use lu::{LuFactors, SymbolicCache};
pub use ordering::minimum_degree;
