//! Descent on a reduced objective `J(u) = goal(u) + k(u)`.
//!
//! The `sobolev` rule steps along `-(gamma - gamma' d^2/dt^2)^{-1} g`, which is
//! the relaxed update `u <- u + w (S(rhs) - u)` with `S` the control boundary
//! value solve. Step lengths come from Barzilai-Borwein estimates safeguarded by
//! Armijo backtracking, so accepted iterates never increase `J`.

use serde::{Deserialize, Serialize};

use crate::control::{regularization_cost, solve_control_bvp, ControlSignal};
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub goal: f64,
    pub cost: f64,
}

impl Evaluation {
    pub fn total(&self) -> f64 {
        self.goal + self.cost
    }
}

pub trait ControlObjective {
    /// `(gamma, gamma')`
    fn regularization(&self) -> (f64, f64);
    fn evaluate(&mut self, u: &ControlSignal) -> Result<Evaluation>;
    /// Objective value and the goal part of the node gradient.
    fn goal_gradient(&mut self, u: &ControlSignal) -> Result<(Evaluation, ControlSignal)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Gradient,
    Sobolev,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Stop once the weighted L2 norm of the gradient drops below this.
    pub tolerance: f64,
    /// Stop once `J` decreases by less than this (relative) for `patience` steps.
    pub min_relative_decrease: f64,
    pub patience: usize,
    pub step_rule: StepRule,
    pub initial_step: f64,
    pub max_backtracks: usize,
    pub armijo: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_iterations: 200,
            tolerance: 1e-8,
            min_relative_decrease: 1e-12,
            patience: 3,
            step_rule: StepRule::Sobolev,
            initial_step: 1.0,
            max_backtracks: 40,
            armijo: 1e-4,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.tolerance >= 0.0) {
            e.push("optimizer tolerance must be nonnegative".into());
        }
        if !(self.initial_step > 0.0) {
            e.push("optimizer initial_step must be positive".into());
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            e.push("optimizer armijo constant must lie in (0, 1)".into());
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub goal: f64,
    pub cost: f64,
    pub gradient_norm: f64,
    pub gradient_inf: f64,
    pub step: f64,
    pub backtracks: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub control: ControlSignal,
    pub evaluation: Evaluation,
    pub gradient_norm: f64,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub stagnated: bool,
}

fn full_gradient(u: &ControlSignal, goal_part: &ControlSignal, gamma: f64, gamma_prime: f64) -> ControlSignal {
    let mut g = goal_part.clone();
    g.axpy(gamma, u);
    if gamma_prime != 0.0 {
        g.axpy(-gamma_prime, &u.second_derivative());
    }
    g
}

pub fn optimize<O: ControlObjective>(
    obj: &mut O,
    u0: &ControlSignal,
    settings: &OptimizerSettings,
) -> Result<OptimizationResult> {
    let (gamma, gamma_prime) = obj.regularization();
    let rule = if gamma > 0.0 {
        settings.step_rule
    } else {
        StepRule::Gradient
    };
    let direction = |g: &ControlSignal| -> Result<ControlSignal> {
        match rule {
            StepRule::Gradient => Ok(g.scaled(-1.0)),
            StepRule::Sobolev => solve_control_bvp(g, gamma, gamma_prime),
        }
    };
    // <s, M s> for the metric in which the step is a gradient step.
    let metric = |s: &ControlSignal| match rule {
        StepRule::Gradient => s.dot(s),
        StepRule::Sobolev => 2.0 * regularization_cost(s, gamma, gamma_prime),
    };

    let mut u = u0.clone();
    let (mut ev, gp) = obj.goal_gradient(&u)?;
    let mut g = full_gradient(&u, &gp, gamma, gamma_prime);
    let mut gnorm = g.l2_norm();
    let mut history = vec![IterationRecord {
        iteration: 0,
        objective: ev.total(),
        goal: ev.goal,
        cost: ev.cost,
        gradient_norm: gnorm,
        gradient_inf: g.max_abs(),
        step: 0.0,
        backtracks: 0,
    }];
    let mut alpha = settings.initial_step;
    let mut converged = gnorm <= settings.tolerance;
    let mut stagnated = false;
    let mut slow = 0;
    let mut it = 0;
    while !converged && it < settings.max_iterations {
        it += 1;
        let d = direction(&g)?;
        let slope = g.dot(&d);
        if !(slope < 0.0) {
            stagnated = true;
            break;
        }
        let j0 = ev.total();
        let mut step = alpha;
        let mut accepted = None;
        let mut backtracks = 0;
        while backtracks <= settings.max_backtracks {
            let mut trial = u.clone();
            trial.axpy(step, &d);
            match obj.evaluate(&trial) {
                Ok(e) if e.total().is_finite() && e.total() <= j0 + settings.armijo * step * slope => {
                    accepted = Some((trial, e));
                    break;
                }
                Ok(_) | Err(crate::Error::Integration { .. }) | Err(crate::Error::WignerBlowUp { .. }) => {
                    step *= 0.5;
                    backtracks += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let Some((un, _)) = accepted else {
            stagnated = true;
            break;
        };
        let (evn, gpn) = obj.goal_gradient(&un)?;
        let gn = full_gradient(&un, &gpn, gamma, gamma_prime);
        let s = un.sub(&u);
        let y = gn.sub(&g);
        let sy = s.dot(&y);
        alpha = if sy > 0.0 {
            (metric(&s) / sy).clamp(1e-6 * settings.initial_step, 1e6 * settings.initial_step)
        } else {
            (2.0 * step).min(1e6 * settings.initial_step)
        };
        let rel = (j0 - evn.total()) / j0.abs().max(1e-300);
        u = un;
        ev = evn;
        g = gn;
        gnorm = g.l2_norm();
        history.push(IterationRecord {
            iteration: it,
            objective: ev.total(),
            goal: ev.goal,
            cost: ev.cost,
            gradient_norm: gnorm,
            gradient_inf: g.max_abs(),
            step,
            backtracks,
        });
        log_iteration(history.last().unwrap());
        converged = gnorm <= settings.tolerance;
        if rel < settings.min_relative_decrease {
            slow += 1;
            if slow >= settings.patience {
                stagnated = true;
                break;
            }
        } else {
            slow = 0;
        }
    }
    Ok(OptimizationResult {
        control: u,
        evaluation: ev,
        gradient_norm: gnorm,
        history,
        converged,
        stagnated,
    })
}

fn log_iteration(r: &IterationRecord) {
    if std::env::var_os("SPINOC_TRACE").is_some() {
        eprintln!(
            "iter {:4}  J = {:.12e}  |g| = {:.3e}  step = {:.3e}  backtracks = {}",
            r.iteration, r.objective, r.gradient_norm, r.step, r.backtracks
        );
    }
}
