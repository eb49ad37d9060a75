//! Maximum-likelihood estimation of θ under the four training modes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::em::em_train;
use crate::error::{Error, Result};
use crate::likelihood::{connected_loglik, dataset_loglik, dataset_loglik_value, LogLik};
use crate::mdp::{Mdp, Theta};
use crate::missing::incomplete_dataset_loglik;
use crate::optim::{maximize_scaled, OptimizerConfig, TraceEntry};
use crate::trajectory::Trajectory;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_EM_OUTER_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Mode {
    /// Complete trajectories only.
    Full,
    /// Gaps scored by their reach probability.
    Composition,
    /// Gaps dropped; only observed steps are scored.
    Connected,
    /// EM with paths of at most `depth` transitions imputed into gaps.
    EmBfs { depth: usize },
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Full => write!(f, "full"),
            Mode::Composition => write!(f, "composition"),
            Mode::Connected => write!(f, "connected"),
            Mode::EmBfs { depth } => write!(f, "em-bfs-{depth}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    /// Accepts `full`, `composition`, `connected` and `em-bfs-H`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "composition" => Ok(Mode::Composition),
            "connected" => Ok(Mode::Connected),
            _ => s
                .strip_prefix("em-bfs-")
                .and_then(|d| d.parse().ok())
                .filter(|&d: &usize| d >= 1)
                .map(|depth| Mode::EmBfs { depth })
                .ok_or_else(|| Error::invalid(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub theta0: Theta,
    pub optimizer: OptimizerConfig,
    pub em_outer_iters: usize,
    /// Recorded for provenance; training itself is deterministic.
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(mode: Mode, theta0: Theta) -> Self {
        TrainConfig { mode, theta0, optimizer: OptimizerConfig::default(), em_outer_iters: DEFAULT_EM_OUTER_ITERS, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub mode: String,
    pub theta: Theta,
    pub iterations: usize,
    /// Final value of the mode's own objective.
    pub loglik: f64,
    pub converged: bool,
    pub warning: Option<String>,
    pub evaluations: usize,
    /// Mean wall time of one log-likelihood+gradient evaluation.
    pub eval_seconds_mean: f64,
    pub eval_seconds_total: f64,
    pub factorization_seconds_total: f64,
    pub infeasible_trajectories: usize,
    pub trace: Vec<TraceEntry>,
    /// Outer iterations of EM modes.
    pub em_outer_iterations: Option<usize>,
}

/// The objective maximized by `mode`, evaluated with gradient.
pub fn objective(mode: Mode, dataset: &[Trajectory], mdp: &Mdp, theta: &[f64]) -> Result<LogLik> {
    match mode {
        Mode::Full => dataset_loglik(dataset, mdp, theta),
        Mode::Composition => incomplete_dataset_loglik(dataset, mdp, theta),
        Mode::Connected => connected_loglik(dataset, mdp, theta),
        Mode::EmBfs { .. } => Err(Error::invalid("EM has no single objective; use the composition likelihood to score it")),
    }
}

pub fn train(dataset: &[Trajectory], mdp: &Mdp, config: &TrainConfig) -> Result<TrainReport> {
    mdp.check_theta(&config.theta0)?;
    config.optimizer.validate()?;
    if config.mode == Mode::Full {
        if let Some(i) = dataset.iter().position(|t| !t.is_complete()) {
            return Err(Error::invalid(format!("full mode needs complete trajectories; trajectory {i} has gaps")));
        }
    }
    if let Mode::EmBfs { depth } = config.mode {
        let res = em_train(mdp, dataset, depth, config.em_outer_iters, &config.theta0, &config.optimizer)?;
        let ll = incomplete_dataset_loglik(dataset, mdp, &res.theta)?;
        let trace = res
            .trace
            .iter()
            .map(|it| TraceEntry {
                iteration: it.iteration,
                loglik: it.surrogate_after,
                grad_norm: f64::NAN,
                step: f64::NAN,
                theta: it.theta.clone(),
            })
            .collect();
        return Ok(TrainReport {
            schema_version: REPORT_SCHEMA_VERSION,
            mode: config.mode.to_string(),
            theta: Theta(res.theta),
            iterations: res.trace.iter().map(|t| t.inner_iterations).sum(),
            loglik: ll.value,
            converged: res.converged,
            warning: res.warning,
            evaluations: res.evaluations,
            eval_seconds_mean: if res.evaluations > 0 { res.eval_seconds / res.evaluations as f64 } else { 0.0 },
            eval_seconds_total: res.eval_seconds,
            factorization_seconds_total: res.factorization_seconds,
            infeasible_trajectories: ll.diagnostics.infeasible.len(),
            trace,
            em_outer_iterations: Some(res.trace.len()),
        });
    }

    let mode = config.mode;
    let f = |theta: &[f64]| objective(mode, dataset, mdp, theta);
    let res = maximize_scaled(&f, &config.theta0, &config.optimizer, &mdp.feature_scale())?;
    Ok(TrainReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: mode.to_string(),
        theta: Theta(res.theta.clone()),
        iterations: res.iterations,
        loglik: res.loglik.value,
        converged: res.converged,
        warning: res.warning.clone(),
        evaluations: res.evaluations,
        eval_seconds_mean: res.mean_eval_seconds(),
        eval_seconds_total: res.eval_time.as_secs_f64(),
        factorization_seconds_total: res.factorization_time.as_secs_f64(),
        infeasible_trajectories: res.loglik.diagnostics.infeasible.len(),
        trace: res.trace,
        em_outer_iterations: None,
    })
}

/// Log-likelihood of a complete dataset at θ; `-inf` if any trajectory has
/// zero probability.
pub fn evaluate(theta: &[f64], full_dataset: &[Trajectory], mdp: &Mdp) -> Result<f64> {
    Ok(dataset_loglik_value(full_dataset, mdp, theta)?.strict_value())
}
