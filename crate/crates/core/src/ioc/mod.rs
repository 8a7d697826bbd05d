//! Inverse optimal control: the costate block system relating segment data to
//! the unknown objective weights, and its normalized least-squares solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::demo_gen::Features;
use crate::dynamics::{Dynamics, Segment};
use crate::error::{check_len, Error, Result};
use crate::koopman::KoopmanModel;
use crate::linalg::{all_finite, condition_number, pseudo_inverse};
use crate::observables::Observable;

/// Which dynamics derivatives went into a block system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Koopman,
    True,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Koopman => "koopman",
            Provenance::True => "true",
        })
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "koopman" => Ok(Provenance::Koopman),
            "true" => Ok(Provenance::True),
            other => Err(Error::InvalidParameter(format!("unknown provenance {other:?}"))),
        }
    }
}

/// Dynamics derivatives: either `df/dx = C K_x dpsi/dx`, `df/du = C K_u` from
/// an identified model, or the Jacobians of a known system.
#[derive(Clone, Copy)]
pub enum DerivativeSource<'a> {
    Koopman {
        model: &'a KoopmanModel,
        observable: &'a dyn Observable,
    },
    True(&'a dyn Dynamics),
}

impl DerivativeSource<'_> {
    pub fn provenance(&self) -> Provenance {
        match self {
            DerivativeSource::Koopman { .. } => Provenance::Koopman,
            DerivativeSource::True(_) => Provenance::True,
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            DerivativeSource::Koopman { model, .. } => (model.state_dim(), model.input_dim()),
            DerivativeSource::True(sys) => (sys.state_dim(), sys.input_dim()),
        }
    }

    pub fn state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match self {
            DerivativeSource::Koopman { model, observable } => {
                &model.c * model.k_x() * observable.state_jacobian(x)
            }
            DerivativeSource::True(sys) => sys.state_jacobian(x, u),
        }
    }

    pub fn input_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match self {
            DerivativeSource::Koopman { model, .. } => &model.c * model.k_u(),
            DerivativeSource::True(sys) => sys.input_jacobian(x, u),
        }
    }
}

/// Blocks of one segment's system, `tau = end - start`:
///
/// ```text
/// A lambda - Phi_x w - V lambda_term = 0
/// B lambda + Phi_u w                 = 0
/// ```
///
/// where `lambda` stacks `lambda_{start+1} .. lambda_end`.
#[derive(Debug, Clone, PartialEq)]
pub struct PmpBlocks {
    /// `n tau x n tau`
    pub a: DMatrix<f64>,
    /// `m tau x n tau`
    pub b: DMatrix<f64>,
    /// `n tau x r`
    pub phi_x: DMatrix<f64>,
    /// `m tau x r`
    pub phi_u: DMatrix<f64>,
    /// `n tau x n`
    pub v: DMatrix<f64>,
}

impl PmpBlocks {
    pub fn steps(&self) -> usize {
        self.a.nrows() / self.v.ncols()
    }
}

/// Column ranges of one segment's costate unknowns in the stacked `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostateColumns {
    /// First column of `lambda_{start+1} .. lambda_end`.
    pub interior: usize,
    pub steps: usize,
    /// First column of `lambda_{end+1}`.
    pub terminal: usize,
}

/// Assembled block system over one or more segments.
///
/// Column layout: `[lambda^1 | w | lambda^1_term | lambda^2 | lambda^2_term | ...]`,
/// so a single segment reads `[lambda | w | lambda_term]`. Rows are the
/// segments' `[A; B]` row blocks in order.
#[derive(Debug, Clone, PartialEq)]
pub struct PmpSystem {
    pub f: DMatrix<f64>,
    pub blocks: Vec<PmpBlocks>,
    pub costates: Vec<CostateColumns>,
    /// First weight column.
    pub weights: usize,
    pub feature_count: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub provenance: Provenance,
}

impl PmpSystem {
    fn from_blocks(blocks: Vec<PmpBlocks>, n: usize, m: usize, r: usize, provenance: Provenance) -> Self {
        let mut costates = Vec::with_capacity(blocks.len());
        let mut col = 0;
        let mut weights = 0;
        for (j, blk) in blocks.iter().enumerate() {
            let interior = col;
            col += n * blk.steps();
            if j == 0 {
                weights = col;
                col += r;
            }
            costates.push(CostateColumns {
                interior,
                steps: blk.steps(),
                terminal: col,
            });
            col += n;
        }
        let rows: usize = blocks.iter().map(|b| (n + m) * b.steps()).sum();
        let mut f = DMatrix::zeros(rows, col);
        let mut row = 0;
        for (blk, cols) in blocks.iter().zip(&costates) {
            let (nt, mt) = (n * cols.steps, m * cols.steps);
            f.view_mut((row, cols.interior), (nt, nt)).copy_from(&blk.a);
            f.view_mut((row, weights), (nt, r)).copy_from(&(-&blk.phi_x));
            f.view_mut((row, cols.terminal), (nt, n)).copy_from(&(-&blk.v));
            f.view_mut((row + nt, cols.interior), (mt, nt)).copy_from(&blk.b);
            f.view_mut((row + nt, weights), (mt, r)).copy_from(&blk.phi_u);
            row += nt + mt;
        }
        Self {
            f,
            blocks,
            costates,
            weights,
            feature_count: r,
            state_dim: n,
            input_dim: m,
            provenance,
        }
    }

    pub fn segment_count(&self) -> usize {
        self.blocks.len()
    }
}

pub fn assemble_pmp(seg: &Segment, feat: &dyn Features, source: DerivativeSource<'_>) -> Result<PmpSystem> {
    let (n, m) = source.dims();
    check_len("segment state dim", n, seg.state_dim())?;
    check_len("segment input dim", m, seg.input_dim())?;
    let tau = seg.steps();
    if tau < 2 {
        return Err(Error::InvalidWindow {
            start: seg.start,
            end: seg.end,
            horizon: seg.end,
        });
    }
    let r = feat.dim();
    let (xs, us) = (&seg.states, &seg.inputs);
    let mut a = DMatrix::identity(n * tau, n * tau);
    let mut b = DMatrix::zeros(m * tau, n * tau);
    let mut phi_x = DMatrix::zeros(n * tau, r);
    let mut phi_u = DMatrix::zeros(m * tau, r);
    let mut v = DMatrix::zeros(n * tau, n);
    for k in 0..tau {
        // Row block k of A pairs with lambda_{start+1+k} at state x_{start+1+k}.
        let (x, u) = (&xs[k + 1], &us[k + 1]);
        let fx_t = source.state_jacobian(x, u).transpose();
        if k + 1 < tau {
            a.view_mut((n * k, n * (k + 1)), (n, n)).copy_from(&(-fx_t));
        } else {
            v.view_mut((n * k, 0), (n, n)).copy_from(&fx_t);
        }
        phi_x.view_mut((n * k, 0), (n, r)).copy_from(&feat.state_jacobian(x, u).transpose());
        // Row block k of B is the input condition at u_{start+k}.
        let (x, u) = (&xs[k], &us[k]);
        b.view_mut((m * k, n * k), (m, n)).copy_from(&source.input_jacobian(x, u).transpose());
        phi_u.view_mut((m * k, 0), (m, r)).copy_from(&feat.input_jacobian(x, u).transpose());
    }
    let blocks = PmpBlocks { a, b, phi_x, phi_u, v };
    if !all_finite(blocks.a.iter().chain(blocks.b.iter()).chain(blocks.v.iter())) {
        return Err(Error::NonFinite("pmp dynamics blocks".into()));
    }
    Ok(PmpSystem::from_blocks(vec![blocks], n, m, r, source.provenance()))
}

/// Stacks systems so they share the weight unknowns and keep separate costates.
pub fn stack_segments(systems: &[PmpSystem]) -> Result<PmpSystem> {
    let first = systems
        .first()
        .ok_or_else(|| Error::InvalidParameter("no systems to stack".into()))?;
    let mut blocks = Vec::new();
    for s in systems {
        check_len("stacked feature count", first.feature_count, s.feature_count)?;
        check_len("stacked state dim", first.state_dim, s.state_dim)?;
        check_len("stacked input dim", first.input_dim, s.input_dim)?;
        if s.provenance != first.provenance {
            return Err(Error::InvalidParameter("cannot stack systems of different provenance".into()));
        }
        blocks.extend(s.blocks.iter().cloned());
    }
    Ok(PmpSystem::from_blocks(
        blocks,
        first.state_dim,
        first.input_dim,
        first.feature_count,
        first.provenance,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEstimate {
    /// Normalized so the entries sum to one.
    pub omega_hat: Vec<f64>,
    /// `omega_hat` scaled to a reference sum (the truth's when compared).
    pub omega_rescaled: Vec<f64>,
    /// Per segment: `lambda_{start+1} .. lambda_end, lambda_{end+1}`.
    #[serde(skip)]
    pub costates: Vec<Vec<DVector<f64>>>,
    /// `|F nu|`
    pub residual: f64,
    pub weight_error: Option<f64>,
    /// Of the equilibrated stationarity system.
    pub condition_number: f64,
    pub segments_used: usize,
    pub provenance: Provenance,
}

impl WeightEstimate {
    /// Rescales to the truth's sum and records the weight error.
    pub fn compare(mut self, truth: &[f64]) -> Result<Self> {
        check_len("true weights", self.omega_hat.len(), truth.len())?;
        let total: f64 = truth.iter().sum();
        self.omega_rescaled = self.omega_hat.iter().map(|w| w * total).collect();
        self.weight_error = Some(weight_error(&self.omega_rescaled, truth)?);
        Ok(self)
    }
}

/// Minimizes `|F nu|^2` subject to the weights summing to one.
///
/// Columns of `F` are scaled to unit norm (`M = F D`), then the stationarity
/// conditions of the scaled problem are solved in augmented form,
///
/// ```text
/// [ I   M   0 ] [ e  ]   [ 0 ]
/// [ M'  0   d ] [ y  ] = [ 0 ]
/// [ 0   d'  0 ] [ mu ]   [ 1 ]
/// ```
///
/// with `d` the scaled weight-sum row, which avoids squaring the conditioning
/// of `F`. An SVD pseudoinverse gives the minimum-norm solution when the
/// system is degenerate.
pub fn solve_weights(sys: &PmpSystem) -> Result<WeightEstimate> {
    let r = sys.feature_count;
    if r == 0 {
        return Err(Error::InfeasibleNormalization("no weight columns".into()));
    }
    let (rows, cols) = sys.f.shape();
    if sys.weights + r > cols {
        return Err(Error::DimensionMismatch {
            context: "weight columns",
            expected: cols,
            actual: sys.weights + r,
        });
    }
    let scale: Vec<f64> = sys
        .f
        .column_iter()
        .map(|c| {
            let norm = c.norm();
            if norm > 0.0 {
                1.0 / norm
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = sys.f.clone();
    for (j, s) in scale.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*s);
    }
    let size = rows + cols + 1;
    let mut kkt = DMatrix::zeros(size, size);
    kkt.view_mut((0, 0), (rows, rows)).fill_with_identity();
    kkt.view_mut((0, rows), (rows, cols)).copy_from(&scaled);
    kkt.view_mut((rows, 0), (cols, rows)).copy_from(&scaled.transpose());
    for j in sys.weights..sys.weights + r {
        kkt[(rows + j, size - 1)] = scale[j];
        kkt[(size - 1, rows + j)] = scale[j];
    }
    let mut rhs = DVector::zeros(size);
    rhs[size - 1] = 1.0;
    let (pinv, _) = pseudo_inverse(&kkt);
    let sol = pinv * rhs;
    let sol = sol.rows(rows, cols);
    let mut nu = DVector::from_iterator(cols, (0..cols).map(|j| sol[j] * scale[j]));
    let total: f64 = nu.rows(sys.weights, r).sum();
    if !total.is_finite() || (total - 1.0).abs() > 1e-6 {
        return Err(Error::InfeasibleNormalization(format!(
            "weights sum to {total} at the least-squares solution"
        )));
    }
    nu /= total;
    let residual = (&sys.f * &nu).norm();
    let n = sys.state_dim;
    let costates = sys
        .costates
        .iter()
        .map(|c| {
            let mut lam: Vec<_> = (0..c.steps).map(|k| nu.rows(c.interior + n * k, n).into_owned()).collect();
            lam.push(nu.rows(c.terminal, n).into_owned());
            lam
        })
        .collect();
    let omega_hat: Vec<f64> = nu.rows(sys.weights, r).iter().cloned().collect();
    Ok(WeightEstimate {
        omega_rescaled: omega_hat.clone(),
        omega_hat,
        costates,
        residual,
        weight_error: None,
        condition_number: condition_number(&kkt),
        segments_used: sys.segment_count(),
        provenance: sys.provenance,
    })
}

/// Assembles every segment, stacks them and solves for the weights.
pub fn estimate_weights(segments: &[Segment], feat: &dyn Features, source: DerivativeSource<'_>) -> Result<WeightEstimate> {
    let systems = segments
        .iter()
        .map(|seg| assemble_pmp(seg, feat, source))
        .collect::<Result<Vec<_>>>()?;
    solve_weights(&stack_segments(&systems)?)
}

/// Euclidean distance between two weight vectors.
pub fn weight_error(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_len("weight vectors", truth.len(), estimate.len())?;
    Ok(estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo_gen::{solve_oc, GoalFeatures, OcSettings};
    use crate::dynamics::{simulate, LinearSystem, Pendulum, PendulumParams, Trajectory};
    use crate::koopman::build_matrices;
    use crate::observables::identity_observable;
    use std::f64::consts::PI;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn pendulum_features() -> GoalFeatures {
        GoalFeatures::new(v(&[PI, 0.0]), 1)
    }

    fn demo() -> (Pendulum, Trajectory) {
        let sys = Pendulum::new(PendulumParams::default()).unwrap();
        let sol = solve_oc(&sys, &pendulum_features(), &[2.0, 1.0, 1.0], &v(&[0.0, 0.0]), 10, &OcSettings::default()).unwrap();
        (sys, sol.trajectory)
    }

    fn wiggly(sys: &dyn Dynamics, horizon: usize) -> Trajectory {
        let inputs: Vec<_> = (0..=horizon).map(|t| v(&[(t as f64 * 1.3).sin() + 0.2])).collect();
        simulate(sys, &v(&[0.3, -0.2]), &inputs).unwrap()
    }

    #[test]
    fn two_step_segment_shape() {
        let sys = Pendulum::new(PendulumParams::default()).unwrap();
        let traj = wiggly(&sys, 4);
        let seg = Segment::from_trajectory(&traj, 1, 3).unwrap();
        let p = assemble_pmp(&seg, &pendulum_features(), DerivativeSource::True(&sys)).unwrap();
        assert_eq!(p.f.shape(), (6, 9));
        assert_eq!(p.weights, 4);
        assert_eq!(p.costates[0].terminal, 7);
        // Bare identity in the last block row of A.
        assert_eq!(p.blocks[0].a.view((2, 2), (2, 2)), DMatrix::identity(2, 2));
        assert_eq!(p.blocks[0].a.view((2, 0), (2, 2)), DMatrix::zeros(2, 2));
    }

    #[test]
    fn short_segment_rejected() {
        let sys = Pendulum::new(PendulumParams::default()).unwrap();
        let traj = wiggly(&sys, 4);
        let seg = Segment::from_trajectory(&traj, 1, 2).unwrap();
        assert!(assemble_pmp(&seg, &pendulum_features(), DerivativeSource::True(&sys)).is_err());
    }

    #[test]
    fn exact_linear_model_matches_true_system() {
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.7]),
            DMatrix::from_row_slice(2, 1, &[0.3, 1.0]),
        )
        .unwrap();
        let traj = wiggly(&sys, 12);
        let seg = Segment::whole(&traj).unwrap();
        let id = identity_observable(2).unwrap();
        let model = KoopmanModel::initialize(&build_matrices(&seg, &id).unwrap(), 0.0).unwrap();
        let feat = pendulum_features();
        let fk = assemble_pmp(&seg, &feat, DerivativeSource::Koopman { model: &model, observable: &id }).unwrap();
        let ft = assemble_pmp(&seg, &feat, DerivativeSource::True(&sys)).unwrap();
        assert!((&fk.f - &ft.f).amax() < 1e-8);
        assert_eq!(fk.provenance, Provenance::Koopman);
    }

    struct Flat;

    impl Features for Flat {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
            v(&[1.0, 2.0])
        }
        fn state_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(2, 2)
        }
        fn input_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(2, 1)
        }
    }

    #[test]
    fn constant_features_zero_blocks() {
        let sys = Pendulum::new(PendulumParams::default()).unwrap();
        let seg = Segment::whole(&wiggly(&sys, 5)).unwrap();
        let p = assemble_pmp(&seg, &Flat, DerivativeSource::True(&sys)).unwrap();
        assert_eq!(p.blocks[0].phi_x.amax(), 0.0);
        assert_eq!(p.blocks[0].phi_u.amax(), 0.0);
    }

    #[test]
    fn recovers_weights_from_optimal_demo() {
        let (sys, traj) = demo();
        let seg = Segment::whole(&traj).unwrap();
        let p = assemble_pmp(&seg, &pendulum_features(), DerivativeSource::True(&sys)).unwrap();
        let est = solve_weights(&p).unwrap().compare(&[2.0, 1.0, 1.0]).unwrap();
        for (w, t) in est.omega_hat.iter().zip([0.5, 0.25, 0.25]) {
            assert!((w - t).abs() < 1e-6, "{:?}", est.omega_hat);
        }
        assert!(est.residual < 1e-8, "residual {}", est.residual);
        assert!((est.omega_hat.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(est.weight_error.unwrap() < 1e-4);
        assert_eq!(est.costates[0].len(), 11);
    }

    #[test]
    fn planted_null_vector_is_returned() {
        let sys = Pendulum::new(PendulumParams::default()).unwrap();
        // Eight steps give more rows than columns, so the planted vector is
        // the only null direction.
        let seg = Segment::whole(&wiggly(&sys, 8)).unwrap();
        let mut p = assemble_pmp(&seg, &pendulum_features(), DerivativeSource::True(&sys)).unwrap();
        let cols = p.f.ncols();
        let mut planted = DVector::from_iterator(cols, (0..cols).map(|j| ((j * 7 % 5) as f64) - 1.5));
        planted.rows_mut(p.weights, 3).copy_from(&v(&[0.2, 0.3, 0.5]));
        let fp = &p.f * &planted;
        p.f -= fp * planted.transpose() / planted.norm_squared();
        let est = solve_weights(&p).unwrap();
        for (w, t) in est.omega_hat.iter().zip([0.2, 0.3, 0.5]) {
            assert!((w - t).abs() < 1e-10, "{:?}", est.omega_hat);
        }
        assert!(est.residual < 1e-12);
    }

    #[test]
    fn uniform_scaling_keeps_estimate() {
        let sys = Pendulum::new(PendulumParams::default()).unwrap();
        let seg = Segment::whole(&wiggly(&sys, 6)).unwrap();
        let p = assemble_pmp(&seg, &pendulum_features(), DerivativeSource::True(&sys)).unwrap();
        let base = solve_weights(&p).unwrap();
        let mut scaled = p.clone();
        scaled.f *= 10.0;
        let big = solve_weights(&scaled).unwrap();
        for (a, b) in base.omega_hat.iter().zip(&big.omega_hat) {
            assert!((a - b).abs() < 1e-10, "{a} {b}");
        }
    }

    #[test]
    fn stacking_layouts() {
        let (sys, traj) = demo();
        let feat = pendulum_features();
        let single = assemble_pmp(&Segment::from_trajectory(&traj, 0, 6).unwrap(), &feat, DerivativeSource::True(&sys)).unwrap();
        assert_eq!(stack_segments(std::slice::from_ref(&single)).unwrap(), single);

        let twice = stack_segments(&[single.clone(), single.clone()]).unwrap();
        assert_eq!(twice.f.nrows(), 2 * single.f.nrows());
        assert_eq!(twice.f.ncols(), single.f.ncols() + 2 * 6 + 2);
        let (a, b) = (solve_weights(&single).unwrap(), solve_weights(&twice).unwrap());
        for (x, y) in a.omega_hat.iter().zip(&b.omega_hat) {
            assert!((x - y).abs() < 1e-8);
        }

        let other = assemble_pmp(&Segment::from_trajectory(&traj, 4, 10).unwrap(), &feat, DerivativeSource::True(&sys)).unwrap();
        let both = solve_weights(&stack_segments(&[single, other]).unwrap()).unwrap();
        assert!(both.residual < 1e-8);
        for (x, y) in a.omega_hat.iter().zip(&both.omega_hat) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(both.segments_used, 2);
    }

    #[test]
    fn stacking_rejects_mismatch() {
        let sys = Pendulum::new(PendulumParams::default()).unwrap();
        let seg = Segment::whole(&wiggly(&sys, 4)).unwrap();
        let a = assemble_pmp(&seg, &pendulum_features(), DerivativeSource::True(&sys)).unwrap();
        let b = assemble_pmp(&seg, &Flat, DerivativeSource::True(&sys)).unwrap();
        assert!(stack_segments(&[a, b]).is_err());
        assert!(stack_segments(&[]).is_err());
    }

    #[test]
    fn weight_error_values() {
        assert_eq!(weight_error(&[2.0, 1.0, 1.0], &[2.0, 1.0, 1.0]).unwrap(), 0.0);
        let e = weight_error(&[1.92, 1.12, 0.96], &[2.0, 1.0, 1.0]).unwrap();
        assert!((e - 0.0224_f64.sqrt()).abs() < 1e-12);
        assert!(weight_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn provenance_parses() {
        assert_eq!("koopman".parse::<Provenance>().unwrap(), Provenance::Koopman);
        assert_eq!(Provenance::True.to_string(), "true");
        assert!("other".parse::<Provenance>().is_err());
    }
}
