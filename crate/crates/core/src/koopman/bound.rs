use serde::{Deserialize, Serialize};

use super::KoopmanModel;
use crate::dynamics::Segment;
use crate::error::{Error, Result};
use crate::observables::{empirical_lipschitz, Observable};

/// Reconstruction error and the one-step prediction error bound built from
/// empirically measured constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `max_t |x_t - C psi(x_t)|` over every state in the data.
    pub l_c_max: f64,
    /// Largest state increment between consecutive samples.
    pub mu_x: f64,
    /// Largest input increment between consecutive samples.
    pub mu_u: f64,
    /// Sampled Lipschitz constant of the observable over the data's bounding box.
    pub mu_g: f64,
    /// Spectral norm of `C K_x`.
    pub ck_x_norm: f64,
    /// Spectral norm of `C K_u`.
    pub ck_u_norm: f64,
    /// `(|C K_x| mu_g + 1) mu_x + |C K_u| mu_u + l_c_max`
    pub bound: f64,
    /// `max_t |C K z_t - x_{t+1}|` over the data.
    pub max_one_step_error: f64,
    /// Whether the measured one-step error stays within `bound + 1e-9`.
    pub bound_holds: bool,
}

pub fn max_recon_error(model: &KoopmanModel, segments: &[Segment], obs: &dyn Observable) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seg in segments {
        for x in &seg.states {
            worst = worst.max((x - &model.c * obs.forward(x)).norm());
        }
    }
    if worst.is_finite() {
        Ok(worst)
    } else {
        Err(Error::NonFinite("reconstruction error".into()))
    }
}

fn spectral_norm(m: &nalgebra::DMatrix<f64>) -> f64 {
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

pub fn dkr_max_recon_error(
    model: &KoopmanModel,
    segments: &[Segment],
    obs: &dyn Observable,
    lipschitz_samples: usize,
    seed: u64,
) -> Result<BoundReport> {
    if segments.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let l_c_max = max_recon_error(model, segments, obs)?;
    let (ck_x, ck_u) = (&model.c * model.k_x(), &model.c * model.k_u());

    let mut mu_x: f64 = 0.0;
    let mut mu_u: f64 = 0.0;
    let mut max_one_step_error: f64 = 0.0;
    for seg in segments {
        for w in seg.states.windows(2) {
            mu_x = mu_x.max((&w[1] - &w[0]).norm());
        }
        for w in seg.inputs.windows(2) {
            mu_u = mu_u.max((&w[1] - &w[0]).norm());
        }
        for t in 0..seg.steps() {
            let pred = model.predict(obs, &seg.states[t], &seg.inputs[t]);
            max_one_step_error = max_one_step_error.max((pred - &seg.states[t + 1]).norm());
        }
    }

    let n = model.state_dim();
    let mut lower = vec![f64::INFINITY; n];
    let mut upper = vec![f64::NEG_INFINITY; n];
    for x in segments.iter().flat_map(|s| &s.states) {
        for i in 0..n {
            lower[i] = lower[i].min(x[i]);
            upper[i] = upper[i].max(x[i]);
        }
    }
    let mu_g = if lower.iter().zip(&upper).all(|(l, u)| l == u) {
        // All states coincide, so mu_x is zero and mu_g does not enter the bound.
        0.0
    } else {
        empirical_lipschitz(obs, &lower, &upper, lipschitz_samples.max(2), seed)?
    };

    let (ck_x_norm, ck_u_norm) = (spectral_norm(&ck_x), spectral_norm(&ck_u));
    let bound = (ck_x_norm * mu_g + 1.0) * mu_x + ck_u_norm * mu_u + l_c_max;
    Ok(BoundReport {
        l_c_max,
        mu_x,
        mu_u,
        mu_g,
        ck_x_norm,
        ck_u_norm,
        bound,
        max_one_step_error,
        bound_holds: max_one_step_error <= bound + 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, slice_segments, LinearSystem, Pendulum, PendulumParams};
    use crate::koopman::build_matrices;
    use crate::observables::identity_observable;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn identity_on_linear_system_is_exact() {
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap();
        let inputs: Vec<_> = (0..=12).map(|t| DVector::from_vec(vec![(t as f64 * 1.7).sin()])).collect();
        let traj = simulate(&sys, &DVector::from_vec(vec![1.0, -1.0]), &inputs).unwrap();
        let segs = slice_segments(&traj, &[(0, 12)]).unwrap();
        let id = identity_observable(2).unwrap();
        let model = KoopmanModel::initialize(&build_matrices(&segs[0], &id).unwrap(), 0.0).unwrap();
        let report = dkr_max_recon_error(&model, &segs, &id, 50, 0).unwrap();
        assert!(report.l_c_max < 1e-12);
        assert!(report.max_one_step_error < 1e-12);
        assert!(report.bound_holds);
        assert!(report.mu_g <= 1.0 + 1e-12);
    }

    #[test]
    fn smaller_step_smaller_increments() {
        let id = identity_observable(2).unwrap();
        let mut previous = (f64::INFINITY, f64::INFINITY);
        for dt in [0.2, 0.1, 0.05, 0.025] {
            let sys = Pendulum::new(PendulumParams {
                dt,
                ..PendulumParams::default()
            })
            .unwrap();
            // Same continuous input profile sampled at the step.
            let inputs: Vec<_> = (0..=10).map(|t| DVector::from_vec(vec![(t as f64 * dt * 3.0).sin()])).collect();
            let traj = simulate(&sys, &DVector::from_vec(vec![0.5, 0.0]), &inputs).unwrap();
            let segs = slice_segments(&traj, &[(0, 10)]).unwrap();
            let model =
                KoopmanModel::initialize(&build_matrices(&segs[0], &id).unwrap(), 1e-8).unwrap();
            let r = dkr_max_recon_error(&model, &segs, &id, 10, 0).unwrap();
            assert!(r.mu_x < previous.0 && r.mu_u < previous.1);
            previous = (r.mu_x, r.mu_u);
        }
    }
}
