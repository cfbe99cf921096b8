//! Small dense helpers on top of nalgebra: a Cholesky factorization with a
//! relative pivot threshold, and the symmetric-matrix utilities the
//! statistics need.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative pivot threshold used by every positive-definiteness check.
pub const PIVOT_REL_TOL: f64 = 1e-12;

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct PdFactor {
    l: DMatrix<f64>,
}

impl PdFactor {
    /// Factor `m`, failing when a pivot falls below `rel_tol` times the
    /// largest diagonal entry.
    pub fn new(m: &DMatrix<f64>, rel_tol: f64) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(Error::Dimension(format!("matrix is {}x{}, expected square", n, m.ncols())));
        }
        let max_diag = (0..n).map(|i| m[(i, i)]).fold(0.0_f64, f64::max);
        let threshold = rel_tol * max_diag;
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > threshold) || !d.is_finite() || max_diag <= 0.0 {
                return Err(Error::SingularInformation {
                    index: j,
                    pivot: d,
                    threshold,
                });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solve `L z = b` in place.
    fn forward(&self, b: &mut DVector<f64>) {
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    fn backward(&self, b: &mut DVector<f64>) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.forward(&mut x);
        self.backward(&mut x);
        x
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for j in 0..b.ncols() {
            let mut col: DVector<f64> = b.column(j).into_owned();
            self.forward(&mut col);
            self.backward(&mut col);
            out.set_column(j, &col);
        }
        out
    }

    /// `bᵀ M⁻¹ b`, computed as the squared norm of `L⁻¹ b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        let mut z = b.clone();
        self.forward(&mut z);
        z.norm_squared()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_matrix(&DMatrix::identity(self.dim(), self.dim()))
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Ratio of the largest to the smallest eigenvalue magnitude.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest relative asymmetry `|m_ij - m_ji| / max|m|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Extreme eigenvalues `(min, max)` of a symmetric matrix.
pub fn eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_solves_spd_system() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let f = PdFactor::new(&m, PIVOT_REL_TOL).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = f.solve(&b);
        assert!((&m * &x - &b).amax() < 1e-14);
        let inv = f.inverse();
        assert!((&m * inv - DMatrix::identity(3, 3)).amax() < 1e-14);
        assert!((f.quad_form(&b) - b.dot(&x)).abs() < 1e-13);
        let det = 4.0 * (3.0 * 2.0 - 0.04) - 1.0 * (2.0 - 0.1) + 0.5 * (0.2 - 1.5);
        assert!((f.log_det() - f64::ln(det)).abs() < 1e-13);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        match PdFactor::new(&m, PIVOT_REL_TOL) {
            Err(Error::SingularInformation { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected singular, got {other:?}"),
        }
        let z = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        assert!(PdFactor::new(&z, PIVOT_REL_TOL).is_err());
    }

    #[test]
    fn scaled_rows_keep_accuracy() {
        // D C D with a tiny scale: Cholesky accuracy is scale invariant.
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.5]);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-5, 1.0]));
        let m = &d * &c * &d;
        let f = PdFactor::new(&m, PIVOT_REL_TOL).unwrap();
        let b = DVector::from_vec(vec![3e-5, 0.4]);
        let direct = PdFactor::new(&c, PIVOT_REL_TOL).unwrap().quad_form(&DVector::from_vec(vec![3.0, 0.4]));
        assert!((f.quad_form(&b) - direct).abs() < 1e-12 * direct);
    }
}
