use super::{dot, Mat, NumericsError};

/// Lower-triangular Cholesky factor of an SPD matrix.
///
/// Only the lower triangle of the input is read.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    pub fn decompose(a: &Mat) -> Result<Self, NumericsError> {
        let n = a.rows();
        if a.cols() != n {
            return Err(NumericsError::NotSquare {
                rows: n,
                cols: a.cols(),
            });
        }
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut pivot = a.get(j, j) - dot(&l.row(j)[..j], &l.row(j)[..j]);
            // NaN lands here too, so non-finite inputs are rejected.
            if pivot.is_nan() || pivot <= 0.0 {
                return Err(NumericsError::NotPositiveDefinite {
                    index: j,
                    value: pivot,
                });
            }
            pivot = pivot.sqrt();
            l.set(j, j, pivot);
            for i in (j + 1)..n {
                let s = a.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j]);
                l.set(i, j, s / pivot);
            }
        }
        Ok(Self { l })
    }

    pub fn log_det(&self) -> f64 {
        let n = self.l.rows();
        2.0 * (0..n).map(|i| self.l.get(i, i).ln()).sum::<f64>()
    }

    /// Solves A x = b in place of a fresh vector.
    #[allow(clippy::needless_range_loop)] // running in-place updates on y
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows();
        assert_eq!(b.len(), n, "solve_vec shape mismatch");
        let mut y = b.to_vec();
        // L y = b
        for i in 0..n {
            let s = dot(&self.l.row(i)[..i], &y[..i]);
            y[i] = (y[i] - s) / self.l.get(i, i);
        }
        // L^T x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l.get(k, i) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        y
    }

    pub fn solve_mat(&self, b: &Mat) -> Mat {
        let n = self.l.rows();
        assert_eq!(b.rows(), n, "solve_mat shape mismatch");
        let mut out = Mat::zeros(n, b.cols());
        let mut col = vec![0.0; n];
        for j in 0..b.cols() {
            for (i, slot) in col.iter_mut().enumerate() {
                *slot = b.get(i, j);
            }
            let x = self.solve_vec(&col);
            for (i, &v) in x.iter().enumerate() {
                out.set(i, j, v);
            }
        }
        out
    }

    /// y = L * x, for sampling from a Gaussian with this covariance factor.
    pub fn factor_mul(&self, x: &[f64]) -> Vec<f64> {
        let n = self.l.rows();
        assert_eq!(x.len(), n);
        (0..n).map(|i| dot(&self.l.row(i)[..=i], &x[..=i])).collect()
    }
}

/// log|A| for SPD A, via the Cholesky factorization.
pub fn chol_logdet_spd(a: &Mat) -> Result<f64, NumericsError> {
    Ok(Cholesky::decompose(a)?.log_det())
}

/// Solves A X = B for SPD A.
pub fn spd_solve(a: &Mat, b: &Mat) -> Result<Mat, NumericsError> {
    Ok(Cholesky::decompose(a)?.solve_mat(b))
}
