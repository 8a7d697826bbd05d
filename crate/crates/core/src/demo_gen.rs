//! Demonstration data: the forward optimal control problem under a known
//! weighted-feature objective, solved by adjoint-gradient descent, and the
//! costate residual that certifies optimality.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, Dynamics, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::linalg::all_finite;

/// Known feature map `phi(x, u)` with analytic Jacobians.
pub trait Features: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `r x n`
    fn state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    /// `r x m`
    fn input_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
}

/// Squared distance of each state coordinate to a goal, plus control effort:
/// `phi = [(x_1 - g_1)^2, ..., (x_n - g_n)^2, |u|^2]`.
///
/// For the pendulum this is `[(theta - theta_g)^2, (theta_dot - theta_dot_g)^2, |u|^2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalFeatures {
    pub goal: DVector<f64>,
    pub input_dim: usize,
}

impl GoalFeatures {
    pub fn new(goal: DVector<f64>, input_dim: usize) -> Self {
        Self { goal, input_dim }
    }
}

impl Features for GoalFeatures {
    fn dim(&self) -> usize {
        self.goal.len() + 1
    }

    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = self.goal.len();
        let mut phi = DVector::zeros(n + 1);
        for i in 0..n {
            phi[i] = (x[i] - self.goal[i]).powi(2);
        }
        phi[n] = u.norm_squared();
        phi
    }

    fn state_jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let n = self.goal.len();
        let mut j = DMatrix::zeros(n + 1, n);
        for i in 0..n {
            j[(i, i)] = 2.0 * (x[i] - self.goal[i]);
        }
        j
    }

    fn input_jacobian(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n = self.goal.len();
        let mut j = DMatrix::zeros(n + 1, u.len());
        for k in 0..u.len() {
            j[(n, k)] = 2.0 * u[k];
        }
        j
    }
}

/// Pendulum features with their Jacobians: `(phi, dphi/dx, dphi/du)`.
pub fn pendulum_features(
    x: &DVector<f64>,
    u: &DVector<f64>,
    goal: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let f = GoalFeatures::new(goal.clone(), u.len());
    (f.eval(x, u), f.state_jacobian(x, u), f.input_jacobian(x, u))
}

/// `J = sum_{t=0}^{T} w' phi(x_t, u_t)`.
pub fn eval_objective(traj: &Trajectory, feat: &dyn Features, weights: &[f64]) -> Result<f64> {
    check_len("objective weights", feat.dim(), weights.len())?;
    let w = DVector::from_row_slice(weights);
    Ok(traj
        .states
        .iter()
        .zip(&traj.inputs)
        .map(|(x, u)| w.dot(&feat.eval(x, u)))
        .sum())
}

/// Costates `lambda_0..lambda_T` and the objective gradient w.r.t. every input.
#[derive(Debug, Clone)]
pub struct AdjointPass {
    pub costates: Vec<DVector<f64>>,
    pub gradient: Vec<DVector<f64>>,
}

/// Backward costate recursion:
/// `lambda_T = dphi_x' w`, `lambda_t = dphi_x' w + f_x' lambda_{t+1}`, and the
/// input gradient `g_t = dphi_u' w + f_u' lambda_{t+1}` (`g_T = dphi_u' w`).
pub fn adjoint_pass(traj: &Trajectory, sys: &dyn Dynamics, feat: &dyn Features, weights: &[f64]) -> Result<AdjointPass> {
    check_len("adjoint weights", feat.dim(), weights.len())?;
    check_len("adjoint state dim", sys.state_dim(), traj.state_dim())?;
    check_len("adjoint input dim", sys.input_dim(), traj.input_dim())?;
    let w = DVector::from_row_slice(weights);
    let horizon = traj.horizon();
    let (xs, us) = (&traj.states, &traj.inputs);
    let mut costates = vec![DVector::zeros(sys.state_dim()); horizon + 1];
    let mut gradient = vec![DVector::zeros(sys.input_dim()); horizon + 1];
    costates[horizon] = feat.state_jacobian(&xs[horizon], &us[horizon]).tr_mul(&w);
    gradient[horizon] = feat.input_jacobian(&xs[horizon], &us[horizon]).tr_mul(&w);
    for t in (0..horizon).rev() {
        let next = &costates[t + 1];
        gradient[t] = feat.input_jacobian(&xs[t], &us[t]).tr_mul(&w) + sys.input_jacobian(&xs[t], &us[t]).tr_mul(next);
        costates[t] = feat.state_jacobian(&xs[t], &us[t]).tr_mul(&w) + sys.state_jacobian(&xs[t], &us[t]).tr_mul(next);
    }
    Ok(AdjointPass { costates, gradient })
}

/// `max_{t < T} |dphi_u' w + f_u' lambda_{t+1}|` with costates from the backward
/// recursion; zero exactly when the trajectory satisfies the stationarity
/// condition at every step.
pub fn pmp_residual(traj: &Trajectory, sys: &dyn Dynamics, feat: &dyn Features, weights: &[f64]) -> Result<f64> {
    let pass = adjoint_pass(traj, sys, feat, weights)?;
    Ok(pass.gradient[..traj.horizon()].iter().map(|g| g.norm()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcSettings {
    /// Stop once the stacked input gradient norm is at or below this.
    pub grad_tol: f64,
    /// Accepted solutions must have a costate residual at or below this.
    pub pmp_tol: f64,
    pub max_iters: usize,
    pub initial_step: f64,
    /// Sufficient-decrease constant of the backtracking line search.
    pub armijo: f64,
}

impl Default for OcSettings {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            pmp_tol: 1e-8,
            max_iters: 200_000,
            initial_step: 1.0,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcSolution {
    pub trajectory: Trajectory,
    pub weights: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub pmp_residual: f64,
    pub iterations: usize,
}

/// Solves `min_u sum_t w' phi(x_t, u_t)` subject to the dynamics from `x0`
/// over `horizon` steps, starting from the zero input sequence.
pub fn solve_oc(
    sys: &dyn Dynamics,
    feat: &dyn Features,
    weights: &[f64],
    x0: &DVector<f64>,
    horizon: usize,
    settings: &OcSettings,
) -> Result<OcSolution> {
    check_len("oc weights", feat.dim(), weights.len())?;
    if weights.iter().any(|&w| !(w >= 0.0)) || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::InvalidParameter(
            "weights must be nonnegative and not all zero".into(),
        ));
    }
    if horizon < 2 {
        return Err(Error::InvalidParameter(format!("horizon must be at least 2, got {horizon}")));
    }
    minimize_inputs(sys, feat, weights, x0, horizon, settings)
}

/// Gradient descent with backtracking on the stacked input sequence. Weight
/// signs are not checked here; the caller decides what weights are admissible.
pub(crate) fn minimize_inputs(
    sys: &dyn Dynamics,
    feat: &dyn Features,
    weights: &[f64],
    x0: &DVector<f64>,
    horizon: usize,
    settings: &OcSettings,
) -> Result<OcSolution> {
    let m = sys.input_dim();
    let mut inputs = vec![DVector::zeros(m); horizon + 1];
    let mut traj = simulate(sys, x0, &inputs)?;
    let mut cost = eval_objective(&traj, feat, weights)?;
    let mut grad = adjoint_pass(&traj, sys, feat, weights)?.gradient;
    let mut step = settings.initial_step;
    let mut iterations = 0;

    loop {
        let gnorm2: f64 = grad.iter().map(|g| g.norm_squared()).sum();
        let gnorm = gnorm2.sqrt();
        if !gnorm.is_finite() {
            return Err(Error::NonFinite("objective gradient".into()));
        }
        if gnorm <= settings.grad_tol {
            break;
        }
        if iterations >= settings.max_iters {
            return Err(Error::NotConverged {
                iterations,
                grad_norm: gnorm,
            });
        }

        let noise = 1e3 * f64::EPSILON * cost.abs().max(1.0);
        let mut s = step;
        loop {
            let trial: Vec<_> = inputs.iter().zip(&grad).map(|(u, g)| u - g * s).collect();
            if let Ok(trial_traj) = simulate(sys, x0, &trial) {
                let trial_cost = eval_objective(&trial_traj, feat, weights)?;
                if trial_cost.is_finite() {
                    let accept = if trial_cost <= cost - settings.armijo * s * gnorm2 {
                        Some(None)
                    } else if (trial_cost - cost).abs() <= noise {
                        // Cost differences are at rounding level; require the
                        // gradient to shrink instead.
                        let g = adjoint_pass(&trial_traj, sys, feat, weights)?.gradient;
                        let n2: f64 = g.iter().map(|v| v.norm_squared()).sum();
                        (n2 < gnorm2).then_some(Some(g))
                    } else {
                        None
                    };
                    if let Some(g) = accept {
                        inputs = trial;
                        traj = trial_traj;
                        cost = trial_cost;
                        grad = match g {
                            Some(g) => g,
                            None => adjoint_pass(&traj, sys, feat, weights)?.gradient,
                        };
                        break;
                    }
                }
            }
            s *= 0.5;
            if s < 1e-30 {
                return Err(Error::NotConverged {
                    iterations,
                    grad_norm: gnorm,
                });
            }
        }
        step = (s * 2.0).min(1e6);
        iterations += 1;
    }

    if !all_finite(traj.states.iter().flat_map(|x| x.iter())) {
        return Err(Error::NonFinite("optimal trajectory".into()));
    }
    let grad_norm = grad.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    let residual = pmp_residual(&traj, sys, feat, weights)?;
    if residual > settings.pmp_tol {
        return Err(Error::NotConverged {
            iterations,
            grad_norm,
        });
    }
    Ok(OcSolution {
        trajectory: traj,
        weights: weights.to_vec(),
        objective: cost,
        grad_norm,
        pmp_residual: residual,
        iterations,
    })
}
