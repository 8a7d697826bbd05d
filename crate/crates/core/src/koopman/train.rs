use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{max_recon_error, KoopmanModel};
use crate::dynamics::Segment;
use crate::error::{check_len, Error, Result};
use crate::observables::Observable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    /// Gradient steps per call.
    pub max_steps: usize,
    pub initial_rate: f64,
    pub armijo: f64,
    /// Give up on a step once backtracking shrinks the rate below this.
    pub min_rate: f64,
    /// Stop early once the largest reconstruction error over the data is at
    /// or below this value.
    pub recon_target: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            max_steps: 200,
            initial_rate: 1e-2,
            armijo: 1e-4,
            min_rate: 1e-14,
            recon_target: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    /// Last accepted rate, a warm start for the next call.
    pub final_rate: f64,
    pub reached_target: bool,
}

fn check_segments(model: &KoopmanModel, segments: &[Segment], obs: &dyn Observable) -> Result<()> {
    check_len("observable output", model.observable_dim(), obs.output_dim())?;
    for seg in segments {
        check_len("segment input dim", model.input_dim(), seg.input_dim())?;
        check_len("segment state dim", model.state_dim(), seg.state_dim())?;
    }
    Ok(())
}

/// Per-segment `l_K + l_C` with the segment index of the first non-finite term.
fn segment_losses(model: &KoopmanModel, segments: &[Segment], obs: &dyn Observable) -> std::result::Result<f64, usize> {
    let (k_x, k_u) = (model.k_x(), model.k_u());
    let mut total = 0.0;
    for (j, seg) in segments.iter().enumerate() {
        let tau = seg.steps() as f64;
        let psi: Vec<_> = seg.states.iter().map(|x| obs.forward(x)).collect();
        let mut loss = 0.0;
        for t in 0..seg.steps() {
            let r = &psi[t + 1] - &k_x * &psi[t] - &k_u * &seg.inputs[t];
            let e = &seg.states[t] - &model.c * &psi[t];
            loss += (r.norm_squared() + e.norm_squared()) / tau;
        }
        if !loss.is_finite() {
            return Err(j);
        }
        total += loss;
    }
    Ok(total)
}

/// `sum_j l_K^j + l_C^j` over the segments.
pub fn total_loss(model: &KoopmanModel, segments: &[Segment], obs: &dyn Observable) -> Result<f64> {
    check_segments(model, segments, obs)?;
    segment_losses(model, segments, obs).map_err(|batch| Error::NonFiniteLoss { batch })
}

/// Total loss and its gradient with respect to the observable parameters, with
/// `K` and `C` held fixed.
pub fn total_loss_gradient(
    model: &KoopmanModel,
    segments: &[Segment],
    obs: &dyn Observable,
) -> Result<(f64, DVector<f64>)> {
    check_segments(model, segments, obs)?;
    let (k_x, k_u) = (model.k_x(), model.k_u());
    let mut loss = 0.0;
    let mut grad = DVector::zeros(obs.param_count());
    for (j, seg) in segments.iter().enumerate() {
        let tau = seg.steps();
        let scale = 2.0 / tau as f64;
        let psi: Vec<_> = seg.states.iter().map(|x| obs.forward(x)).collect();
        // Sensitivity of the segment loss to each lifted state.
        let mut sens = vec![DVector::zeros(obs.output_dim()); tau + 1];
        let mut seg_loss = 0.0;
        for t in 0..tau {
            let r = &psi[t + 1] - &k_x * &psi[t] - &k_u * &seg.inputs[t];
            let e = &seg.states[t] - &model.c * &psi[t];
            seg_loss += (r.norm_squared() + e.norm_squared()) / tau as f64;
            sens[t + 1] += &r * scale;
            sens[t] -= k_x.tr_mul(&r) * scale + model.c.tr_mul(&e) * scale;
        }
        if !seg_loss.is_finite() {
            return Err(Error::NonFiniteLoss { batch: j });
        }
        loss += seg_loss;
        if obs.param_count() > 0 {
            for (x, s) in seg.states.iter().zip(&sens) {
                grad += obs.param_gradient(x, s);
            }
        }
    }
    Ok((loss, grad))
}

/// Gradient descent with backtracking on the observable parameters. The loss
/// never increases: a step is taken only when it passes the sufficient
/// decrease test, and training stops when no such step exists.
pub fn train_theta(
    model: &KoopmanModel,
    segments: &[Segment],
    obs: &mut dyn Observable,
    settings: &TrainSettings,
) -> Result<TrainReport> {
    let (mut loss, mut grad) = total_loss_gradient(model, segments, obs)?;
    let initial_loss = loss;
    let mut rate = settings.initial_rate;
    let mut steps = 0;
    let target_met = |obs: &dyn Observable| -> Result<bool> {
        Ok(match settings.recon_target {
            Some(target) => max_recon_error(model, segments, obs)? <= target,
            None => false,
        })
    };
    let mut reached_target = target_met(obs)?;

    if obs.param_count() > 0 {
        let mut theta = obs.params();
        while steps < settings.max_steps && !reached_target {
            let gnorm2 = grad.norm_squared();
            if gnorm2 == 0.0 {
                break;
            }
            let mut accepted = false;
            while rate >= settings.min_rate {
                let trial = &theta - &grad * rate;
                obs.set_params(&trial)?;
                match segment_losses(model, segments, obs) {
                    Ok(l) if l <= loss - settings.armijo * rate * gnorm2 => {
                        theta = trial;
                        accepted = true;
                        break;
                    }
                    _ => rate *= 0.5,
                }
            }
            if !accepted {
                obs.set_params(&theta)?;
                break;
            }
            (loss, grad) = total_loss_gradient(model, segments, obs)?;
            steps += 1;
            rate *= 2.0;
            reached_target = target_met(obs)?;
        }
    }

    Ok(TrainReport {
        initial_loss,
        final_loss: loss,
        steps,
        final_rate: rate.max(settings.min_rate),
        reached_target,
    })
}
