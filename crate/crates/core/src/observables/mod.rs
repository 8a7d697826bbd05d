//! Observable functions `psi(x; theta)` lifting the state into the space where
//! the Koopman operator acts.

mod mlp;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};

pub use mlp::{Activation, Layer, Mlp, MlpCheckpoint, MlpConfig};

/// A state lifting with exact derivatives.
///
/// Evaluation is read-only; only [`Observable::set_params`] mutates.
pub trait Observable: Send + Sync {
    fn state_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `dpsi/dx`, an `N x n` matrix.
    fn state_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn param_count(&self) -> usize {
        0
    }

    fn params(&self) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn set_params(&mut self, theta: &DVector<f64>) -> Result<()> {
        check_len("observable parameters", 0, theta.len())
    }

    /// Gradient of `sensitivity' psi(x; theta)` with respect to `theta`.
    fn param_gradient(&self, _x: &DVector<f64>, _sensitivity: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
}

/// A fixed linear lifting `psi(x) = M x` with no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservable {
    pub matrix: DMatrix<f64>,
}

impl LinearObservable {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }
}

impl Observable for LinearObservable {
    fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    fn state_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// `psi(x) = x`.
pub fn identity_observable(n: usize) -> Result<LinearObservable> {
    if n == 0 {
        return Err(Error::InvalidParameter("state dimension must be positive".into()));
    }
    Ok(LinearObservable::new(DMatrix::identity(n, n)))
}

pub fn mlp_observable(cfg: &MlpConfig) -> Result<Mlp> {
    Mlp::new(cfg)
}

/// Largest difference quotient `|psi(x) - psi(y)| / |x - y|` over all pairs of
/// `samples` points drawn uniformly from the box `[lower, upper]`.
///
/// Points come from a seeded stream, so raising `samples` only adds pairs and
/// the estimate never decreases.
pub fn empirical_lipschitz(
    obs: &dyn Observable,
    lower: &[f64],
    upper: &[f64],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let n = obs.state_dim();
    check_len("lipschitz lower bound", n, lower.len())?;
    check_len("lipschitz upper bound", n, upper.len())?;
    if samples < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let valid = lower.iter().zip(upper).all(|(l, u)| l.is_finite() && u.is_finite() && l <= u);
    if !valid || lower.iter().zip(upper).all(|(l, u)| l == u) {
        return Err(Error::InvalidParameter("degenerate sampling region".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<DVector<f64>> = (0..samples)
        .map(|_| {
            DVector::from_iterator(
                n,
                lower.iter().zip(upper).map(|(&l, &u)| if l < u { rng.random_range(l..u) } else { l }),
            )
        })
        .collect();
    let values: Vec<_> = points.iter().map(|p| obs.forward(p)).collect();
    let mut best: f64 = 0.0;
    for i in 0..samples {
        for j in 0..i {
            let dx = (&points[i] - &points[j]).norm();
            if dx > 0.0 {
                best = best.max((&values[i] - &values[j]).norm() / dx);
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant;

    impl Observable for Constant {
        fn state_dim(&self) -> usize {
            2
        }
        fn output_dim(&self) -> usize {
            3
        }
        fn forward(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![1.0, -2.0, 0.5])
        }
        fn state_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(3, 2)
        }
    }

    #[test]
    fn identity_basics() {
        let id = identity_observable(2).unwrap();
        let x = DVector::from_vec(vec![1.5, -2.0]);
        assert_eq!(id.forward(&x), x);
        assert_eq!(id.state_jacobian(&x), DMatrix::identity(2, 2));
        assert_eq!(id.param_count(), 0);
        assert!(identity_observable(0).is_err());
    }

    #[test]
    fn identity_lipschitz_is_one() {
        let id = identity_observable(2).unwrap();
        let l = empirical_lipschitz(&id, &[-3.0, -1.0], &[2.0, 5.0], 60, 3).unwrap();
        assert!(l <= 1.0 + 1e-12 && l > 0.99);
    }

    #[test]
    fn constant_lipschitz_is_zero() {
        assert_eq!(empirical_lipschitz(&Constant, &[0.0, 0.0], &[1.0, 1.0], 30, 1).unwrap(), 0.0);
    }

    #[test]
    fn lipschitz_rejects_degenerate_region() {
        let id = identity_observable(2).unwrap();
        assert!(empirical_lipschitz(&id, &[1.0, 1.0], &[1.0, 1.0], 10, 0).is_err());
        assert!(empirical_lipschitz(&id, &[1.0, 0.0], &[0.0, 1.0], 10, 0).is_err());
        assert!(empirical_lipschitz(&id, &[0.0, 0.0], &[1.0, 1.0], 1, 0).is_err());
    }
}
