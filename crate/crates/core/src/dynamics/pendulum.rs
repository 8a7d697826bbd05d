use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Dynamics;
use crate::error::{check_len, Error, Result};
use crate::linalg::all_finite;

/// Physical and discretization parameters of a torque-driven pendulum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    /// kg
    pub mass: f64,
    /// m
    pub length: f64,
    /// m/s^2
    pub gravity: f64,
    /// Euler step, s
    pub dt: f64,
}

impl PendulumParams {
    /// 1 kg, 10 m arm, g = 10, 1 ms step.
    pub fn long_arm() -> Self {
        Self {
            mass: 1.0,
            length: 10.0,
            gravity: 10.0,
            dt: 0.001,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mass", self.mass),
            ("length", self.length),
            ("gravity", self.gravity),
            ("dt", self.dt),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("pendulum {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn inertia(&self) -> f64 {
        self.mass * self.length * self.length
    }
}

impl Default for PendulumParams {
    /// 1 kg, 1 m arm, g = 10, 0.1 s step: over ten steps the optimal swing
    /// excites every cost feature enough for the weights to be identifiable.
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            gravity: 10.0,
            dt: 0.1,
        }
    }
}

/// `sin` and `cos` with the angle reduced against the `f64` value of pi, so
/// both equilibria `theta = 0` and `theta = PI` give exactly zero sine.
fn reduced_sin_cos(theta: f64) -> (f64, f64) {
    let k = (theta / PI).round();
    let r = theta - k * PI;
    let sign = if (k as i64).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    (sign * r.sin(), sign * r.cos())
}

/// Explicit-Euler pendulum, state `[theta, theta_dot]`, input torque.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pendulum {
    pub params: PendulumParams,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl Dynamics for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let (s, _) = reduced_sin_cos(x[0]);
        let accel = (u[0] - p.mass * p.gravity * p.length * s) / p.inertia();
        DVector::from_vec(vec![x[0] + p.dt * x[1], x[1] + p.dt * accel])
    }

    fn state_jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        let (_, c) = reduced_sin_cos(x[0]);
        DMatrix::from_row_slice(2, 2, &[1.0, p.dt, -p.dt * p.gravity / p.length * c, 1.0])
    }

    fn input_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        DMatrix::from_row_slice(2, 1, &[0.0, p.dt / p.inertia()])
    }
}

/// One Euler step of the pendulum with validated, finite inputs.
pub fn pendulum_step(x: &DVector<f64>, u: &DVector<f64>, params: &PendulumParams) -> Result<DVector<f64>> {
    params.validate()?;
    check_len("pendulum state", 2, x.len())?;
    check_len("pendulum input", 1, u.len())?;
    if !all_finite(x.iter().chain(u.iter())) {
        return Err(Error::NonFinite("pendulum_step".into()));
    }
    Ok(Pendulum { params: *params }.step(x, u))
}
