//! Masking/training/evaluation loop of the missing-data experiments, shared by
//! the command-line `bench` and the test suite.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datagen::apply_missing;
use crate::error::{Error, Result};
use crate::mdp::{Mdp, Theta};
use crate::optim::OptimizerConfig;
use crate::trainer::{evaluate, objective, train, Mode, TrainConfig};
use crate::trajectory::Trajectory;

/// One (method, missing probability, seed) cell of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    /// Network label, e.g. `20x20`.
    pub size: String,
    pub n_states: usize,
    pub p: f64,
    pub seed: u64,
    /// Log-likelihood of the complete dataset at the trained θ.
    pub eval_loglik: f64,
    /// Mean wall time of one objective evaluation during training.
    pub ll_eval_seconds: f64,
    pub factorization_seconds: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub train_seconds: f64,
    pub theta: Vec<f64>,
}

/// Masks `full` with probability `p` and seed `seed`, trains with `mode`
/// from `theta0` and scores the result on `full`.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    mdp: &Mdp,
    full: &[Trajectory],
    size: &str,
    mode: Mode,
    p: f64,
    seed: u64,
    theta0: &[f64],
    optimizer: &OptimizerConfig,
) -> Result<CellResult> {
    let masked = apply_missing(full, p, seed)?;
    let mut cfg = TrainConfig::new(mode, Theta(theta0.to_vec()));
    cfg.optimizer = optimizer.clone();
    cfg.seed = seed;
    let start = Instant::now();
    let report = train(&masked, mdp, &cfg)?;
    let train_seconds = start.elapsed().as_secs_f64();
    Ok(CellResult {
        method: mode.to_string(),
        size: size.to_string(),
        n_states: mdp.n_states(),
        p,
        seed,
        eval_loglik: evaluate(&report.theta, full, mdp)?,
        ll_eval_seconds: report.eval_seconds_mean,
        factorization_seconds: report.factorization_seconds_total,
        iterations: report.iterations,
        evaluations: report.evaluations,
        converged: report.converged,
        train_seconds,
        theta: report.theta.0,
    })
}

/// Median wall time of `repeats` evaluations of the `mode` objective (value
/// and gradient) at `theta`, after one untimed warm-up evaluation.
pub fn time_objective(mode: Mode, data: &[Trajectory], mdp: &Mdp, theta: &[f64], repeats: usize) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::invalid("at least one timed repetition is needed"));
    }
    objective(mode, data, mdp, theta)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        objective(mode, data, mdp, theta)?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Sample mean with a two-sided Student-t confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanInterval {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub low: f64,
    pub high: f64,
}

impl MeanInterval {
    /// `mean ± t_{n-1, (1+level)/2} · s / √n`; a single value gets a
    /// zero-width interval.
    pub fn new(values: &[f64], level: f64) -> Result<MeanInterval> {
        let n = values.len();
        if n == 0 {
            return Err(Error::invalid("confidence interval of an empty sample"));
        }
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::invalid(format!("confidence level must be in (0, 1), got {level}")));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Ok(MeanInterval { n, mean, std_dev: 0.0, low: mean, high: mean });
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std_dev = var.sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::invalid(e.to_string()))?
            .inverse_cdf(0.5 + level / 2.0);
        let half = t * std_dev / (n as f64).sqrt();
        Ok(MeanInterval { n, mean, std_dev, low: mean - half, high: mean + half })
    }

    pub fn overlaps(&self, other: &MeanInterval) -> bool {
        self.low <= other.high && other.low <= self.high
    }
}
