//! Gradient-based maximization with a backtracking (Armijo) line search.

use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::LogLik;
use crate::stats;

/// Something to maximize: value and gradient at a parameter vector.
pub trait Objective {
    fn evaluate(&self, theta: &[f64]) -> Result<LogLik>;
}

impl<F: Fn(&[f64]) -> Result<LogLik>> Objective for F {
    fn evaluate(&self, theta: &[f64]) -> Result<LogLik> {
        self(theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Plain gradient ascent.
    Steepest,
    /// Quasi-Newton direction from the BFGS inverse-Hessian update.
    Bfgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Stop once `‖grad‖∞` falls below this.
    pub grad_tol: f64,
    pub armijo: f64,
    pub shrink: f64,
    pub initial_step: f64,
    pub max_backtracks: usize,
    pub direction: Direction,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 500,
            grad_tol: 1e-5,
            armijo: 1e-4,
            shrink: 0.5,
            initial_step: 1.0,
            max_backtracks: 60,
            direction: Direction::Bfgs,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::invalid(format!("grad_tol must be positive, got {}", self.grad_tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::invalid(format!("shrink factor must be in (0, 1), got {}", self.shrink)));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::invalid(format!("Armijo constant must be in (0, 1), got {}", self.armijo)));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::invalid(format!("initial step must be positive, got {}", self.initial_step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loglik: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimResult {
    pub theta: Vec<f64>,
    pub loglik: LogLik,
    pub iterations: usize,
    pub converged: bool,
    pub warning: Option<String>,
    pub trace: Vec<TraceEntry>,
    pub evaluations: usize,
    /// Wall time spent in objective evaluations.
    pub eval_time: Duration,
    /// Part of `eval_time` spent factorizing.
    pub factorization_time: Duration,
}

impl OptimResult {
    pub fn mean_eval_seconds(&self) -> f64 {
        if self.evaluations == 0 {
            0.0
        } else {
            self.eval_time.as_secs_f64() / self.evaluations as f64
        }
    }
}

/// Value changes this small are treated as round-off. Near the optimum a
/// step is then judged by whether it shrinks the gradient.
const VALUE_NOISE: f64 = 1e-12;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Counter<'a, O: ?Sized> {
    objective: &'a O,
    evaluations: usize,
    eval_time: Duration,
    factorization_time: Duration,
}

impl<O: Objective + ?Sized> Counter<'_, O> {
    fn eval(&mut self, theta: &[f64]) -> Result<LogLik> {
        let start = Instant::now();
        let (res, st) = stats::measure(|| self.objective.evaluate(theta));
        self.eval_time += start.elapsed();
        self.factorization_time += st.factorization_time;
        self.evaluations += 1;
        let ll = res?;
        if !ll.value.is_finite() || ll.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidSolution(format!("objective not finite at {theta:?}: {}", ll.value)));
        }
        Ok(ll)
    }
}

/// Maximizes `objective` from `theta0`. Stops at `‖grad‖∞ < grad_tol` or
/// after `max_iters`; a failed line search ends the run at the best iterate
/// with a warning.
pub fn maximize<O: Objective + ?Sized>(objective: &O, theta0: &[f64], config: &OptimizerConfig) -> Result<OptimResult> {
    maximize_scaled(objective, theta0, config, &vec![1.0; theta0.len()])
}

/// Like [`maximize`], but search directions are computed in the coordinates
/// `θ_i · scale_i`. Passing the typical magnitude of each feature evens out
/// the curvature across parameters. Stopping still uses the unscaled gradient.
pub fn maximize_scaled<O: Objective + ?Sized>(
    objective: &O,
    theta0: &[f64],
    config: &OptimizerConfig,
    scale: &[f64],
) -> Result<OptimResult> {
    config.validate()?;
    let dim = theta0.len();
    if scale.len() != dim || scale.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::invalid(format!("scale must hold {dim} positive finite values")));
    }
    let mut counter = Counter { objective, evaluations: 0, eval_time: Duration::ZERO, factorization_time: Duration::ZERO };
    let mut current = counter.eval(theta0).map_err(|e| Error::NonFiniteStart(e.to_string()))?;
    let mut theta = theta0.to_vec();
    let mut trace = vec![TraceEntry {
        iteration: 0,
        loglik: current.value,
        grad_norm: inf_norm(&current.grad),
        step: 0.0,
        theta: theta.clone(),
    }];
    // inverse Hessian of the negated objective
    let mut h_inv: Option<Vec<f64>> = None;
    let mut warning = None;
    let mut converged = inf_norm(&current.grad) < config.grad_tol;
    let mut iterations = 0;
    let mut stalled = false;

    while !converged && iterations < config.max_iters {
        let g = current.grad.clone();
        let g_scaled: Vec<f64> = g.iter().zip(scale).map(|(x, w)| x / w).collect();
        let mut direction: Vec<f64> = match (&h_inv, config.direction) {
            (Some(h), Direction::Bfgs) => (0..dim).map(|i| dot(&h[i * dim..(i + 1) * dim], &g_scaled)).collect(),
            _ => g_scaled.clone(),
        };
        let mut slope = dot(&g_scaled, &direction);
        if h_inv.is_none() || !(slope > 0.0) {
            // first or reset step: gradient scaled to unit largest component
            let norm = inf_norm(&g_scaled).max(1.0);
            direction = g_scaled.iter().map(|x| x / norm).collect();
            slope = dot(&g_scaled, &direction);
            h_inv = None;
        }
        // back to θ coordinates; the slope is invariant
        direction.iter_mut().zip(scale).for_each(|(d, w)| *d /= w);

        let mut step = config.initial_step;
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let trial: Vec<f64> = theta.iter().zip(&direction).map(|(t, d)| t + step * d).collect();
            match counter.eval(&trial) {
                Ok(ll)
                    if ll.value >= current.value + config.armijo * step * slope
                        || ((ll.value - current.value).abs() <= VALUE_NOISE && inf_norm(&ll.grad) < inf_norm(&g)) =>
                {
                    accepted = Some((trial, ll));
                    break;
                }
                Ok(_) => {}
                Err(e) if e.is_numerical() => debug!("trial step {step:e} rejected: {e}"),
                Err(e) => return Err(e),
            }
            step *= config.shrink;
        }
        let Some((next_theta, next)) = accepted else {
            if h_inv.is_some() {
                // retry from the gradient direction before giving up
                h_inv = None;
                continue;
            }
            let msg = format!("line search failed at iteration {}; returning best iterate", iterations + 1);
            warn!("{msg}");
            warning = Some(msg);
            break;
        };
        iterations += 1;

        let gain = next.value - current.value;
        let from_reset = h_inv.is_none();
        if gain <= VALUE_NOISE && inf_norm(&next.grad) >= inf_norm(&g) {
            if stalled || from_reset {
                let msg = format!(
                    "no measurable progress at iteration {iterations} with gradient norm {:e}",
                    inf_norm(&current.grad)
                );
                warn!("{msg}");
                warning = Some(msg);
                break;
            }
            stalled = true;
            h_inv = None;
            continue;
        }
        stalled = false;

        if config.direction == Direction::Bfgs {
            let s: Vec<f64> = next_theta.iter().zip(&theta).zip(scale).map(|((a, b), w)| (a - b) * w).collect();
            let y: Vec<f64> = g.iter().zip(&next.grad).zip(scale).map(|((a, b), w)| (a - b) / w).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                let h = h_inv.get_or_insert_with(|| {
                    let scale = sy / dot(&y, &y);
                    let mut eye = vec![0.0; dim * dim];
                    (0..dim).for_each(|i| eye[i * dim + i] = scale);
                    eye
                });
                bfgs_update(h, &s, &y, sy);
            }
        }

        theta = next_theta;
        current = next;
        converged = inf_norm(&current.grad) < config.grad_tol;
        trace.push(TraceEntry {
            iteration: iterations,
            loglik: current.value,
            grad_norm: inf_norm(&current.grad),
            step,
            theta: theta.clone(),
        });
    }

    Ok(OptimResult {
        theta,
        loglik: current,
        iterations,
        converged,
        warning,
        trace,
        evaluations: counter.evaluations,
        eval_time: counter.eval_time,
        factorization_time: counter.factorization_time,
    })
}

/// `H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ` with `ρ = 1 / sᵀy`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::Diagnostics;

    fn quadratic(theta: &[f64]) -> Result<LogLik> {
        // -(x-1)^2 - 10 (y+2)^2
        let (x, y) = (theta[0], theta[1]);
        Ok(LogLik {
            value: -(x - 1.0).powi(2) - 10.0 * (y + 2.0).powi(2),
            grad: vec![-2.0 * (x - 1.0), -20.0 * (y + 2.0)],
            diagnostics: Diagnostics::default(),
        })
    }

    #[test]
    fn both_directions_find_the_maximum() {
        for direction in [Direction::Bfgs, Direction::Steepest] {
            let cfg = OptimizerConfig { direction, ..Default::default() };
            let res = maximize(&quadratic, &[0.0, 0.0], &cfg).unwrap();
            assert!(res.converged, "{direction:?}");
            assert!((res.theta[0] - 1.0).abs() < 1e-5 && (res.theta[1] + 2.0).abs() < 1e-6);
            for w in res.trace.windows(2) {
                assert!(w[1].loglik >= w[0].loglik - 1e-12);
            }
        }
    }

    #[test]
    fn zero_gradient_stops_immediately() {
        let flat = |_: &[f64]| -> Result<LogLik> { Ok(LogLik::zero(2)) };
        let res = maximize(&flat, &[0.3, -1.0], &OptimizerConfig::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.theta, vec![0.3, -1.0]);
    }

    #[test]
    fn failing_start_is_reported() {
        let bad = |_: &[f64]| -> Result<LogLik> { Err(Error::Singular { step: 0 }) };
        assert!(matches!(maximize(&bad, &[0.0], &OptimizerConfig::default()), Err(Error::NonFiniteStart(_))));
    }

    #[test]
    fn invalid_region_is_backtracked_out_of() {
        // objective defined only for x < 0.5
        let f = |t: &[f64]| -> Result<LogLik> {
            if t[0] >= 0.5 {
                return Err(Error::InvalidSolution("outside".into()));
            }
            Ok(LogLik { value: t[0] - 0.1 * t[0] * t[0], grad: vec![1.0 - 0.2 * t[0]], diagnostics: Diagnostics::default() })
        };
        let cfg = OptimizerConfig { max_iters: 50, ..Default::default() };
        let res = maximize(&f, &[0.0], &cfg).unwrap();
        assert!(res.theta[0] < 0.5 && res.theta[0] > 0.49);
    }
}
