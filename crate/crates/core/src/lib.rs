//! Maximum-entropy inverse reinforcement learning with missing trajectory
//! segments, computed through sparse linear systems.

// `!(x > 0.0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod em;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod io;
pub mod likelihood;
pub mod mdp;
pub mod missing;
pub mod optim;
pub mod sparse;
pub mod stats;
pub mod trainer;
pub mod trajectory;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
