//! Discrete-time dynamical systems, simulation, and trajectory data.

mod pendulum;
mod trajectory;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::linalg::all_finite;

pub use pendulum::{pendulum_step, Pendulum, PendulumParams};
pub use trajectory::{slice_segments, Segment, Trajectory};

/// A differentiable map `x_{t+1} = f(x_t, u_t)` with analytic Jacobians.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `df/dx`, an `n x n` matrix.
    fn state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    /// `df/du`, an `n x m` matrix.
    fn input_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
}

/// `x_{t+1} = A x_t + B u_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidParameter("A must be square".into()));
        }
        check_len("B rows", a.nrows(), b.nrows())?;
        Ok(Self { a, b })
    }
}

impl Dynamics for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn state_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn input_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
}

/// Rolls the system forward from `x0`. `inputs` holds `T + 1` entries; the last
/// one is stored in the trajectory but does not drive the dynamics.
pub fn simulate(sys: &dyn Dynamics, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<Trajectory> {
    check_len("initial state", sys.state_dim(), x0.len())?;
    if inputs.is_empty() {
        return Err(Error::InvalidParameter("input sequence must hold at least one entry".into()));
    }
    for u in inputs {
        check_len("input", sys.input_dim(), u.len())?;
    }
    if !all_finite(x0.iter()) || !inputs.iter().all(|u| all_finite(u.iter())) {
        return Err(Error::NonFinite("simulate inputs".into()));
    }
    let horizon = inputs.len() - 1;
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(x0.clone());
    for t in 0..horizon {
        let next = sys.step(&states[t], &inputs[t]);
        if !all_finite(next.iter()) {
            return Err(Error::NonFinite(format!("state at step {}", t + 1)));
        }
        states.push(next);
    }
    Trajectory::new(states, inputs.to_vec())
}
