//! Small dense linear-algebra helpers shared by the identification and IOC code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a Cholesky factor is treated as singular.
const SPD_RCOND: f64 = 1e-14;

/// Solves `gram * X = rhs` for a symmetric positive (semi)definite `gram`.
///
/// Fails with [`Error::SingularGram`] when the factorization breaks down or the
/// squared pivot ratio falls below a relative threshold.
pub fn spd_solve(gram: &DMatrix<f64>, rhs: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let chol = gram.clone().cholesky().ok_or(Error::SingularGram(context))?;
    let diag = chol.l_dirty().diagonal();
    let max = diag.iter().cloned().fold(0.0_f64, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || (min / max).powi(2) < SPD_RCOND * gram.nrows() as f64 {
        return Err(Error::SingularGram(context));
    }
    Ok(chol.solve(rhs))
}

/// Moore-Penrose pseudoinverse via SVD with the usual `max(dim) * eps * sigma_max`
/// cutoff. Returns the pseudoinverse and the numerical rank.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut pinv = DMatrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            pinv += v_t.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    (pinv, rank)
}

/// Condition number `sigma_max / sigma_min` (infinite when rank deficient).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    }
}

/// Horizontally concatenates column vectors into a matrix.
pub fn columns(vectors: &[DVector<f64>], nrows: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(nrows, vectors.len());
    for (j, v) in vectors.iter().enumerate() {
        m.set_column(j, v);
    }
    m
}

/// Vertically stacks two matrices with the same column count.
pub fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(top.ncols(), bottom.ncols());
    let mut m = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    m.rows_mut(0, top.nrows()).copy_from(top);
    m.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    m
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>], cols_if_empty: usize) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(cols_if_empty, Vec::len);
    for r in rows {
        crate::error::check_len("matrix row", ncols, r.len())?;
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Serde adapter storing a `DMatrix<f64>` as a list of rows.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::rows_to_matrix(&rows, 0).map_err(serde::de::Error::custom)
    }
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_inverse_of_invertible_is_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let (p, rank) = pseudo_inverse(&m);
        assert_eq!(rank, 2);
        let inv = m.clone().try_inverse().unwrap();
        assert!((p - inv).norm() < 1e-14);
    }

    #[test]
    fn pseudo_inverse_rank_deficient_is_min_norm() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (p, rank) = pseudo_inverse(&m);
        assert_eq!(rank, 1);
        let expected = DMatrix::from_element(2, 2, 0.25);
        assert!((p - expected).norm() < 1e-14);
    }

    #[test]
    fn spd_solve_rejects_rank_one() {
        let z = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let g = &z * z.transpose();
        assert!(spd_solve(&g, &DMatrix::identity(2, 2), "test").is_err());
    }
}
