//! Quick oracle checks behind the `validate` command.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{demonstration, ExperimentConfig};
use crate::demo_gen::{adjoint_pass, eval_objective};
use crate::dynamics::{simulate, Dynamics, LinearSystem, Segment};
use crate::error::Result;
use crate::ioc::{assemble_pmp, solve_weights, weight_error, DerivativeSource};
use crate::koopman::{build_matrices, concat_matrices, dkr_max_recon_error, solve_c, solve_k, KoopmanModel};
use crate::observables::{identity_observable, mlp_observable, MlpConfig, Observable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, value: f64, limit: f64) -> Check {
    Check {
        name: name.into(),
        passed: value < limit,
        detail: format!("{value:.3e} (limit {limit:.0e})"),
    }
}

fn random_linear(rng: &mut ChaCha8Rng) -> Result<LinearSystem> {
    let mut a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
    let radius = a.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
    a *= 0.9 / radius.max(0.9);
    let b = DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0));
    LinearSystem::new(a, b)
}

fn excited(sys: &dyn Dynamics, rng: &mut ChaCha8Rng, steps: usize) -> Result<Segment> {
    let inputs: Vec<_> = (0..=steps).map(|_| DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0))).collect();
    let x0 = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
    Segment::whole(&simulate(sys, &x0, &inputs)?)
}

/// Runs the fast oracle checks on the configured pendulum and on seeded
/// random linear systems.
pub fn validation_suite(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Check>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let demo = demonstration(cfg)?;
    let sys = cfg.system()?;
    let feat = cfg.features();
    let whole = Segment::whole(&demo.trajectory)?;
    let est = solve_weights(&assemble_pmp(&whole, &feat, DerivativeSource::True(&sys))?)?.compare(&cfg.omega_true)?;
    checks.push(check("oracle weight recovery", est.weight_error.unwrap_or(f64::INFINITY), 1e-4));

    let lin = random_linear(&mut rng)?;
    let seg = excited(&lin, &mut rng, 24)?;
    let id = identity_observable(2)?;
    let dm = build_matrices(&seg, &id)?;
    let truth = DMatrix::from_fn(2, 3, |i, j| if j < 2 { lin.a[(i, j)] } else { lin.b[(i, 0)] });
    checks.push(check("linear operator recovery", (solve_k(&dm, 0.0)? - truth).norm(), 1e-8));
    checks.push(check("linear reconstruction", (solve_c(&dm).c - DMatrix::identity(2, 2)).norm(), 1e-8));

    let batches: Vec<_> = (0..3)
        .map(|_| excited(&lin, &mut rng, 6).and_then(|s| build_matrices(&s, &id)))
        .collect::<Result<_>>()?;
    let mut model = KoopmanModel::initialize(&batches[0], 0.0)?;
    for b in &batches[1..] {
        model.incorporate(b)?;
    }
    let all = concat_matrices(&batches);
    let k_batch = solve_k(&all, 0.0)?;
    let c_batch = solve_c(&all).c;
    let rel = ((&model.k - &k_batch).norm() / k_batch.norm()).max((&model.c - &c_batch).norm() / c_batch.norm());
    checks.push(check("recursive equals batch", rel, 1e-6));

    let net = mlp_observable(&MlpConfig {
        seed,
        ..cfg.observable.clone()
    })?;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
        let jac = net.state_jacobian(&x);
        let mut fd = DMatrix::zeros(jac.nrows(), 2);
        for k in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += 1e-6;
            xm[k] -= 1e-6;
            fd.set_column(k, &((net.forward(&xp) - net.forward(&xm)) / 2e-6));
        }
        worst = worst.max((&jac - &fd).norm() / (1.0 + fd.norm()));
    }
    checks.push(check("observable jacobian", worst, 1e-5));

    let w = &cfg.omega_true;
    // Away from the optimum, so the gradient is not trivially small.
    let shaken: Vec<_> = demo.trajectory.inputs.iter().map(|u| u.map(|v| v + rng.random_range(-0.5..0.5))).collect();
    let traj = simulate(&sys, &demo.trajectory.states[0], &shaken)?;
    let pass = adjoint_pass(&traj, &sys, &feat, w)?;
    let mut worst: f64 = 0.0;
    for t in 0..=traj.horizon() {
        let mut plus = traj.inputs.clone();
        let mut minus = traj.inputs.clone();
        plus[t][0] += 1e-6;
        minus[t][0] -= 1e-6;
        let jp = eval_objective(&simulate(&sys, &traj.states[0], &plus)?, &feat, w)?;
        let jm = eval_objective(&simulate(&sys, &traj.states[0], &minus)?, &feat, w)?;
        let fd = (jp - jm) / 2e-6;
        worst = worst.max((pass.gradient[t][0] - fd).abs() / (1.0 + fd.abs()));
    }
    checks.push(check("adjoint gradient", worst, 1e-4));

    let bound = dkr_max_recon_error(&model, &[seg], &id, cfg.lipschitz_samples, seed)?;
    checks.push(Check {
        name: "one-step error bound".into(),
        passed: bound.bound_holds,
        detail: format!("{:.3e} <= {:.3e}", bound.max_one_step_error, bound.bound),
    });

    let e1 = weight_error(&[1.92, 1.12, 0.96], &[2.0, 1.0, 1.0])?;
    let e2 = weight_error(&[1.96, 1.05, 0.98], &[2.0, 1.0, 1.0])?;
    checks.push(Check {
        name: "weight error anchors".into(),
        passed: (0.14..=0.16).contains(&e1) && (0.06..=0.08).contains(&e2),
        detail: format!("{e1:.4}, {e2:.4}"),
    });
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_defaults() {
        let checks = validation_suite(&ExperimentConfig::default(), 0).unwrap();
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert_eq!(checks.len(), 8);
    }
}
