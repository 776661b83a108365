//! Dense Levenberg-Marquardt on a manifold state.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("solver diverged: cost is {0}")]
    Diverged(f64),
}

/// Gauss-Newton system `H dx = -g` and the cost it was built at.
pub struct Linearization {
    pub cost: f64,
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
}

pub trait Problem {
    type State: Clone;
    fn cost(&self, state: &Self::State) -> f64;
    fn linearize(&self, state: &Self::State) -> Linearization;
    fn retract(&self, state: &Self::State, delta: &DVector<f64>) -> Self::State;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self { max_iterations: 30, relative_cost_tolerance: 1e-6, step_tolerance: 1e-8, initial_lambda: 1e-4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LmReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub cost_evaluations: usize,
}

impl LmReport {
    /// True when no accepted step increased the cost.
    pub fn monotone(&self) -> bool {
        self.cost_history.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Marquardt-scaled damping keeps the iterates invariant to a uniform
/// scaling of the cost.
pub fn levenberg_marquardt<P: Problem>(
    problem: &P,
    initial: P::State,
    settings: &LmSettings,
) -> Result<(P::State, LmReport), SolverError> {
    let mut state = initial;
    let mut cost = problem.cost(&state);
    let mut report =
        LmReport { initial_cost: cost, cost_history: vec![cost], cost_evaluations: 1, ..Default::default() };
    if !cost.is_finite() {
        return Err(SolverError::Diverged(cost));
    }
    let mut lambda = settings.initial_lambda;
    for _ in 0..settings.max_iterations {
        if cost == 0.0 {
            break;
        }
        let lin = problem.linearize(&state);
        if !lin.cost.is_finite() || lin.gradient.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Diverged(lin.cost));
        }
        let n = lin.gradient.len();
        let diag_max = lin.hessian.diagonal().iter().fold(0.0_f64, |m, v| m.max(*v));
        let floor = (diag_max * 1e-12).max(f64::MIN_POSITIVE);
        let mut accepted = None;
        for _ in 0..12 {
            let mut a = lin.hessian.clone();
            for i in 0..n {
                a[(i, i)] += lambda * lin.hessian[(i, i)].max(floor);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let dx = chol.solve(&(-&lin.gradient));
            let candidate = problem.retract(&state, &dx);
            let new_cost = problem.cost(&candidate);
            report.cost_evaluations += 1;
            if new_cost.is_finite() && new_cost <= cost {
                accepted = Some((candidate, new_cost, dx.norm()));
                lambda = (lambda / 3.0).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        report.iterations += 1;
        let Some((candidate, new_cost, step)) = accepted else {
            break;
        };
        let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
        state = candidate;
        cost = new_cost;
        report.cost_history.push(cost);
        if rel < settings.relative_cost_tolerance || step < settings.step_tolerance {
            break;
        }
    }
    report.final_cost = cost;
    Ok((state, report))
}
