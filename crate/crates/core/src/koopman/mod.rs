//! Deep Koopman representation: lifted data matrices, closed-form operator and
//! reconstruction solves, their recursive rank-`tau` updates, and the losses
//! minimized when training the observable parameters.

mod bound;
mod train;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::Segment;
use crate::error::{check_len, Error, Result};
use crate::linalg::{columns, pseudo_inverse, serde_rows, spd_solve, vstack};
use crate::observables::Observable;

pub use bound::{dkr_max_recon_error, max_recon_error, BoundReport};
pub use train::{total_loss, total_loss_gradient, train_theta, TrainReport, TrainSettings};

/// Lifted snapshot matrices of one segment, `tau = end - start` columns each.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    /// `N x tau`: `psi(x_start) .. psi(x_{end-1})`
    pub psi_x: DMatrix<f64>,
    /// `N x tau`: `psi(x_{start+1}) .. psi(x_end)`
    pub psi_x_next: DMatrix<f64>,
    /// `m x tau`: `u_start .. u_{end-1}`
    pub inputs: DMatrix<f64>,
    /// `(N + m) x tau`: `[psi_x; inputs]`
    pub z: DMatrix<f64>,
    /// `n x tau`: `x_start .. x_{end-1}`
    pub states: DMatrix<f64>,
}

impl DataMatrices {
    pub fn steps(&self) -> usize {
        self.z.ncols()
    }
}

pub fn build_matrices(seg: &Segment, obs: &dyn Observable) -> Result<DataMatrices> {
    check_len("segment state dim", obs.state_dim(), seg.state_dim())?;
    let tau = seg.steps();
    if tau == 0 {
        return Err(Error::InvalidParameter("segment must contain at least one transition".into()));
    }
    let big_n = obs.output_dim();
    let lifted: Vec<_> = seg.states.iter().map(|x| obs.forward(x)).collect();
    let psi_x = columns(&lifted[..tau], big_n);
    let psi_x_next = columns(&lifted[1..], big_n);
    let inputs = columns(&seg.inputs[..tau], seg.input_dim());
    let states = columns(&seg.states[..tau], seg.state_dim());
    let z = vstack(&psi_x, &inputs);
    Ok(DataMatrices {
        psi_x,
        psi_x_next,
        inputs,
        z,
        states,
    })
}

/// Concatenates data matrices column-wise (in the given order).
pub fn concat_matrices(parts: &[DataMatrices]) -> DataMatrices {
    let cat = |f: &dyn Fn(&DataMatrices) -> &DMatrix<f64>| {
        let rows = f(&parts[0]).nrows();
        let total: usize = parts.iter().map(|p| f(p).ncols()).sum();
        let mut m = DMatrix::zeros(rows, total);
        let mut col = 0;
        for p in parts {
            let block = f(p);
            m.columns_mut(col, block.ncols()).copy_from(block);
            col += block.ncols();
        }
        m
    };
    DataMatrices {
        psi_x: cat(&|d| &d.psi_x),
        psi_x_next: cat(&|d| &d.psi_x_next),
        inputs: cat(&|d| &d.inputs),
        z: cat(&|d| &d.z),
        states: cat(&|d| &d.states),
    }
}

/// `K = Psi_next Z' (Z Z' + ridge I)^{-1}`.
pub fn solve_k(dm: &DataMatrices, ridge: f64) -> Result<DMatrix<f64>> {
    let gram = ridged_gram(&dm.z, ridge);
    // K' solves gram K' = Z Psi_next'.
    let rhs = &dm.z * dm.psi_x_next.transpose();
    Ok(spd_solve(&gram, &rhs, "solve_k")?.transpose())
}

/// Reconstruction matrix and the numerical rank of `Psi_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionSolve {
    pub c: DMatrix<f64>,
    pub rank: usize,
    /// `Psi_x` lacks full row rank; `c` is the minimum-norm least-squares solution.
    pub rank_deficient: bool,
}

/// `C = X Psi_x^+`.
pub fn solve_c(dm: &DataMatrices) -> ReconstructionSolve {
    let (pinv, rank) = pseudo_inverse(&dm.psi_x);
    let rank_deficient = rank < dm.psi_x.nrows();
    if rank_deficient {
        log::warn!(
            "observable matrix has rank {rank} < {}; using the minimum-norm reconstruction",
            dm.psi_x.nrows()
        );
    }
    ReconstructionSolve {
        c: &dm.states * pinv,
        rank,
        rank_deficient,
    }
}

fn ridged_gram(m: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let mut g = m * m.transpose();
    for i in 0..g.nrows() {
        g[(i, i)] += ridge;
    }
    g
}

/// Block recursive least-squares step shared by the `K` and `C` updates:
/// `W += (Y - W X) gamma X' G^{-1}` with `gamma = (I + X' G^{-1} X)^{-1}`,
/// then `G += X X'`.
fn rls_update(
    weights: &mut DMatrix<f64>,
    gram: &mut DMatrix<f64>,
    regressors: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    context: &'static str,
) -> Result<()> {
    let tau = regressors.ncols();
    let g_inv_x = spd_solve(gram, regressors, context)?;
    let mut inner = regressors.tr_mul(&g_inv_x);
    for i in 0..tau {
        inner[(i, i)] += 1.0;
    }
    let innovation = targets - &*weights * regressors;
    // gamma X' G^{-1} = inner^{-1} (G^{-1} X)'
    let gain = spd_solve(&inner, &g_inv_x.transpose(), context)?;
    *weights += innovation * gain;
    *gram += regressors * regressors.transpose();
    Ok(())
}

/// Koopman operator `K = [K_x | K_u]`, reconstruction `C`, and the Gram
/// matrices of all data folded in so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanModel {
    #[serde(rename = "K", with = "serde_rows")]
    pub k: DMatrix<f64>,
    #[serde(rename = "C", with = "serde_rows")]
    pub c: DMatrix<f64>,
    /// `Z Z' + ridge I` over incorporated batches.
    #[serde(rename = "G_Z", with = "serde_rows")]
    pub gram_z: DMatrix<f64>,
    /// `Psi_x Psi_x' + ridge I` over incorporated batches.
    #[serde(rename = "G_Psi", with = "serde_rows")]
    pub gram_psi: DMatrix<f64>,
    #[serde(rename = "epsilon")]
    pub ridge: f64,
    /// Path of the observable checkpoint this model was fit with, if saved.
    #[serde(default)]
    pub observable: Option<String>,
    pub batches_incorporated: usize,
}

impl KoopmanModel {
    /// Closed-form `K` and `C` from a first batch.
    pub fn initialize(dm: &DataMatrices, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0) {
            return Err(Error::InvalidParameter(format!("ridge must be nonnegative, got {ridge}")));
        }
        let k = solve_k(dm, ridge)?;
        let c = solve_c(dm).c;
        Ok(Self {
            k,
            c,
            gram_z: ridged_gram(&dm.z, ridge),
            gram_psi: ridged_gram(&dm.psi_x, ridge),
            ridge,
            observable: None,
            batches_incorporated: 1,
        })
    }

    pub fn observable_dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.k.ncols() - self.k.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn k_x(&self) -> DMatrix<f64> {
        self.k.columns(0, self.observable_dim()).into_owned()
    }

    pub fn k_u(&self) -> DMatrix<f64> {
        self.k.columns(self.observable_dim(), self.input_dim()).into_owned()
    }

    /// One-step state prediction `C K [psi(x); u]`.
    pub fn predict(&self, obs: &dyn Observable, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let psi = obs.forward(x);
        &self.c * (self.k_x() * psi + self.k_u() * u)
    }

    fn check_batch(&self, dm: &DataMatrices) -> Result<()> {
        check_len("batch lifted rows", self.k.ncols(), dm.z.nrows())?;
        check_len("batch state rows", self.state_dim(), dm.states.nrows())
    }

    /// Recursive operator update with a new batch.
    pub fn update_k(&mut self, dm: &DataMatrices) -> Result<()> {
        self.check_batch(dm)?;
        rls_update(&mut self.k, &mut self.gram_z, &dm.z, &dm.psi_x_next, "update_k")
    }

    /// Recursive reconstruction update. The innovation is `X - C Psi_x`,
    /// the residual of the reconstruction loss.
    pub fn update_c(&mut self, dm: &DataMatrices) -> Result<()> {
        self.check_batch(dm)?;
        rls_update(&mut self.c, &mut self.gram_psi, &dm.psi_x, &dm.states, "update_c")
    }

    /// Both updates, counting the batch once.
    pub fn incorporate(&mut self, dm: &DataMatrices) -> Result<()> {
        self.update_k(dm)?;
        self.update_c(dm)?;
        self.batches_incorporated += 1;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        let big_n = model.k.nrows();
        check_len("checkpoint C cols", big_n, model.c.ncols())?;
        check_len("checkpoint G_Z", model.k.ncols(), model.gram_z.nrows())?;
        check_len("checkpoint G_Psi", big_n, model.gram_psi.nrows())?;
        Ok(model)
    }
}

/// `(1/tau) sum_t |psi(x_{t+1}) - K z_t|^2`.
pub fn loss_k(model: &KoopmanModel, seg: &Segment, obs: &dyn Observable) -> Result<f64> {
    let dm = build_matrices(seg, obs)?;
    model.check_batch(&dm)?;
    Ok((&dm.psi_x_next - &model.k * &dm.z).norm_squared() / dm.steps() as f64)
}

/// `(1/tau) sum_t |x_t - C psi(x_t)|^2`.
pub fn loss_c(model: &KoopmanModel, seg: &Segment, obs: &dyn Observable) -> Result<f64> {
    let dm = build_matrices(seg, obs)?;
    model.check_batch(&dm)?;
    Ok((&dm.states - &model.c * &dm.psi_x).norm_squared() / dm.steps() as f64)
}
