//! Closed-form optimum of the ELBO lower bound.
//!
//! For binary observations with an affine-sigmoid decoder, the training
//! objective admits an analytic lower bound whose maximizers are available in
//! closed form: the decoder bias is the sample mean of the centered data
//! (times four), the decoder weights come from the top eigenvectors of the
//! sample covariance `S` shifted by the constant 4, and the encoder moments
//! follow from those. Eigenvalues of `S` at or below 4 contribute nothing,
//! which is also the basis of the latent-dimension selector.

use rayon::prelude::*;
use thiserror::Error;

use crate::datagen::BinaryDataset;
use crate::numerics::{
    eig_sym_desc, pairwise_sum, spd_solve, Cholesky, Mat, NumericsError, SymEigen,
};

#[derive(Debug, Error)]
pub enum ClosedFormError {
    #[error("empty data")]
    EmptyData,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("kappa {kappa} exceeds data dimension {d}")]
    KappaTooLarge { kappa: usize, d: usize },
    #[error("entry {value} at index {index} is not binary")]
    NonBinary { index: usize, value: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Centered observations: `y = x - 1/2`, entries in {-1/2, +1/2}.
///
/// Stored bit-packed (a set bit means +1/2), which keeps the covariance
/// computation exact integer work.
#[derive(Debug, Clone)]
pub struct CenteredData {
    bits: Vec<u64>,
    words_per_row: usize,
    n: usize,
    d: usize,
}

impl CenteredData {
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    /// y[i][j], one of -0.5 or +0.5.
    #[inline]
    pub fn y(&self, i: usize, j: usize) -> f64 {
        if self.bit(i, j) {
            0.5
        } else {
            -0.5
        }
    }

    /// The underlying binary observation x[i][j], 0.0 or 1.0.
    #[inline]
    pub fn x(&self, i: usize, j: usize) -> f64 {
        if self.bit(i, j) {
            1.0
        } else {
            0.0
        }
    }

    #[inline]
    fn bit(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.words_per_row + j / 64] >> (j % 64) & 1 == 1
    }

    pub fn fill_row_y(&self, i: usize, out: &mut [f64]) {
        assert_eq!(out.len(), self.d);
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = self.y(i, j);
        }
    }

    fn column_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.d];
        for i in 0..self.n {
            let row = &self.bits[i * self.words_per_row..(i + 1) * self.words_per_row];
            for (j, count) in counts.iter_mut().enumerate() {
                *count += row[j / 64] >> (j % 64) & 1;
            }
        }
        counts
    }

    fn column_bitsets(&self) -> Vec<Vec<u64>> {
        let words_per_col = self.n.div_ceil(64);
        let mut cols = vec![vec![0u64; words_per_col]; self.d];
        for i in 0..self.n {
            let row = &self.bits[i * self.words_per_row..(i + 1) * self.words_per_row];
            for (j, col) in cols.iter_mut().enumerate() {
                let bit = row[j / 64] >> (j % 64) & 1;
                col[i / 64] |= bit << (i % 64);
            }
        }
        cols
    }
}

/// Shifts binary observations by one half: y = x - (1/2) * ones.
pub fn center_targets(x: &BinaryDataset) -> CenteredData {
    let n = x.n();
    let d = x.d();
    let words_per_row = d.div_ceil(64);
    let mut bits = Vec::with_capacity(n * words_per_row);
    for i in 0..n {
        bits.extend_from_slice(x.row_words(i));
    }
    CenteredData {
        bits,
        words_per_row,
        n,
        d,
    }
}

/// Centers explicit fp rows, rejecting entries outside {0, 1}.
pub fn center_targets_from_rows(rows: &[Vec<f64>]) -> Result<CenteredData, ClosedFormError> {
    if rows.is_empty() {
        return Err(ClosedFormError::EmptyData);
    }
    let d = rows[0].len();
    let words_per_row = d.div_ceil(64);
    let mut bits = vec![0u64; rows.len() * words_per_row];
    for (i, row) in rows.iter().enumerate() {
        if row.len() != d {
            return Err(ClosedFormError::Shape(format!(
                "row {i} has {} entries, expected {d}",
                row.len()
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            if v == 1.0 {
                bits[i * words_per_row + j / 64] |= 1u64 << (j % 64);
            } else if v != 0.0 {
                return Err(ClosedFormError::NonBinary {
                    index: i * d + j,
                    value: v,
                });
            }
        }
    }
    Ok(CenteredData {
        bits,
        words_per_row,
        n: rows.len(),
        d,
    })
}

/// Optimal decoder bias: the sample mean of 4y. Entries lie in [-2, 2].
pub fn sample_mean_b(y: &CenteredData) -> Result<Vec<f64>, ClosedFormError> {
    if y.n == 0 {
        return Err(ClosedFormError::EmptyData);
    }
    let n = y.n as f64;
    Ok(y.column_counts()
        .iter()
        .map(|&c| 4.0 * (c as f64) / n - 2.0)
        .collect())
}

const PAR_GRAM_THRESHOLD: usize = 256;

/// Sample covariance of 4y around `b`: S = (1/N) sum (4y - b)(4y - b)^T.
///
/// Evaluated through the exact integer Gram matrix of the underlying binary
/// data: with c = b + 2*ones, S = 16 G/N - 4(xbar c^T + c xbar^T) + c c^T.
pub fn sample_cov_s(y: &CenteredData, b: &[f64]) -> Result<Mat, ClosedFormError> {
    if y.n == 0 {
        return Err(ClosedFormError::EmptyData);
    }
    if b.len() != y.d {
        return Err(ClosedFormError::Shape(format!(
            "b has {} entries, expected {}",
            b.len(),
            y.d
        )));
    }
    let d = y.d;
    let n = y.n as f64;
    let cols = y.column_bitsets();
    let counts = y.column_counts();
    let xbar: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let c: Vec<f64> = b.iter().map(|&bj| bj + 2.0).collect();

    let gram_row = |j: usize| -> Vec<f64> {
        let cj = &cols[j];
        (j..d)
            .map(|k| {
                let ck = &cols[k];
                let mut ones = 0u64;
                for (a, b) in cj.iter().zip(ck) {
                    ones += (a & b).count_ones() as u64;
                }
                ones as f64
            })
            .collect()
    };

    let upper: Vec<Vec<f64>> = if d >= PAR_GRAM_THRESHOLD {
        (0..d).into_par_iter().map(gram_row).collect()
    } else {
        (0..d).map(gram_row).collect()
    };

    let mut s = Mat::zeros(d, d);
    for j in 0..d {
        for (off, &g) in upper[j].iter().enumerate() {
            let k = j + off;
            let v = 16.0 * g / n - 4.0 * (xbar[j] * c[k] + c[j] * xbar[k]) + c[j] * c[k];
            s.set(j, k, v);
            s.set(k, j, v);
        }
    }
    Ok(s)
}

/// Optimal decoder weights from the eigendecomposition of S (rotation fixed
/// to the identity): column j is `u_j * sqrt(lambda_j - 4)` when
/// `lambda_j > 4`, otherwise zero. Rank deficiency is legal.
pub fn optimal_w_from_eigen(eig: &SymEigen, kappa: usize) -> Result<Mat, ClosedFormError> {
    let d = eig.eigenvalues.len();
    if kappa > d {
        return Err(ClosedFormError::KappaTooLarge { kappa, d });
    }
    let mut w = Mat::zeros(d, kappa);
    for (j, &lam) in eig.eigenvalues.iter().take(kappa).enumerate() {
        if lam > 4.0 {
            let scale = (lam - 4.0).sqrt();
            for i in 0..d {
                w.set(i, j, scale * eig.eigenvectors.get(i, j));
            }
        }
    }
    Ok(w)
}

/// Optimal decoder weights for covariance `S` and latent dimension `kappa`.
pub fn optimal_w(s: &Mat, kappa: usize) -> Result<Mat, ClosedFormError> {
    let eig = eig_sym_desc(s)?;
    optimal_w_from_eigen(&eig, kappa)
}

/// Optimal encoder covariance: (I + W^T W / 4)^{-1}. SPD with eigenvalues in (0, 1].
pub fn optimal_sigma_z(w: &Mat) -> Result<Mat, ClosedFormError> {
    let m = encoder_precision(w);
    Ok(spd_solve(&m, &Mat::identity(w.cols()))?)
}

/// I + W^T W / 4, the inverse of the optimal encoder covariance.
fn encoder_precision(w: &Mat) -> Mat {
    let kappa = w.cols();
    let mut m = w.matmul_tn(w);
    m.scale(0.25);
    for i in 0..kappa {
        m.set(i, i, m.get(i, i) + 1.0);
    }
    m
}

/// Optimal encoder mean for one observation: Sigma_z W^T (x - 1/2 - b/4).
pub fn optimal_mu_z(w: &Mat, b: &[f64], x: &[f64]) -> Result<Vec<f64>, ClosedFormError> {
    let d = w.rows();
    if b.len() != d || x.len() != d {
        return Err(ClosedFormError::Shape(format!(
            "expected b and x of length {d}, got {} and {}",
            b.len(),
            x.len()
        )));
    }
    for (j, &v) in x.iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(ClosedFormError::NonBinary { index: j, value: v });
        }
    }
    let t: Vec<f64> = x
        .iter()
        .zip(b)
        .map(|(&xj, &bj)| xj - 0.5 - 0.25 * bj)
        .collect();
    let u = w.matvec_t(&t);
    let chol = Cholesky::decompose(&encoder_precision(w))?;
    Ok(chol.solve_vec(&u))
}

/// The lower bound for the average ELBO at decoder parameters (W, b).
///
/// Uses the low-rank structure of C = 4I + W W^T: quadratic forms go through
/// the Woodbury inverse and log|C| through the kappa-sized determinant, so no
/// d x d factorization is needed. `elbo_lower_bound_dense` is the dense
/// reference path.
pub fn elbo_lower_bound(w: &Mat, b: &[f64], y: &CenteredData) -> Result<f64, ClosedFormError> {
    let d = y.d;
    if w.rows() != d || b.len() != d {
        return Err(ClosedFormError::Shape(format!(
            "W is {}x{} and b has {} entries for data of dimension {d}",
            w.rows(),
            w.cols(),
            b.len()
        )));
    }
    if y.n == 0 {
        return Err(ClosedFormError::EmptyData);
    }
    let kappa = w.cols();
    // M = 4I + W^T W; C^{-1} = (I - W M^{-1} W^T) / 4.
    let mut m = w.matmul_tn(w);
    for i in 0..kappa {
        m.set(i, i, m.get(i, i) + 4.0);
    }
    let chol = Cholesky::decompose(&m)?;
    // log|C| = (d - kappa) log 4 + log|M|.
    let log_det_c = (d - kappa) as f64 * 4.0_f64.ln() + chol.log_det();

    let zp: Vec<f64> = b.iter().map(|&bj| 2.0 - bj).collect();
    let zm: Vec<f64> = b.iter().map(|&bj| -2.0 - bj).collect();
    let mut z = vec![0.0; d];
    let quad: Vec<f64> = (0..y.n)
        .map(|i| {
            for (j, slot) in z.iter_mut().enumerate() {
                *slot = if y.bit(i, j) { zp[j] } else { zm[j] };
            }
            let norm2: f64 = crate::numerics::dot(&z, &z);
            let v = w.matvec_t(&z);
            let mv = chol.solve_vec(&v);
            let vmv: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
            0.25 * (norm2 - vmv)
        })
        .collect();
    let mean_quad = pairwise_sum(&quad) / y.n as f64;
    Ok(-0.5 * mean_quad - 0.5 * log_det_c + 0.5 * d as f64)
}

/// Dense reference evaluation of the bound (factorizes the d x d matrix C).
pub fn elbo_lower_bound_dense(
    w: &Mat,
    b: &[f64],
    y: &CenteredData,
) -> Result<f64, ClosedFormError> {
    let d = y.d;
    if w.rows() != d || b.len() != d {
        return Err(ClosedFormError::Shape("bad W or b".into()));
    }
    let mut c = w.matmul_nt(w);
    for i in 0..d {
        c.set(i, i, c.get(i, i) + 4.0);
    }
    let chol = Cholesky::decompose(&c)?;
    let log_det_c = chol.log_det();
    let mut z = vec![0.0; d];
    let quad: Vec<f64> = (0..y.n)
        .map(|i| {
            for (j, slot) in z.iter_mut().enumerate() {
                *slot = 4.0 * y.y(i, j) - b[j];
            }
            let cz = chol.solve_vec(&z);
            z.iter().zip(&cz).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    let mean_quad = pairwise_sum(&quad) / y.n as f64;
    Ok(-0.5 * mean_quad - 0.5 * log_det_c + 0.5 * d as f64)
}

/// The equivalent trace form (d - log|C| - tr(C^{-1} S)) / 2, dense path.
pub fn elbo_lower_bound_trace(w: &Mat, s: &Mat) -> Result<f64, ClosedFormError> {
    let d = s.rows();
    if w.rows() != d || s.cols() != d {
        return Err(ClosedFormError::Shape("bad W or S".into()));
    }
    let mut c = w.matmul_nt(w);
    for i in 0..d {
        c.set(i, i, c.get(i, i) + 4.0);
    }
    let chol = Cholesky::decompose(&c)?;
    let x = chol.solve_mat(s);
    let trace: f64 = (0..d).map(|i| x.get(i, i)).sum();
    Ok(0.5 * (d as f64 - chol.log_det() - trace))
}

/// tr(C^{-1} S) through the Woodbury inverse: (tr S - tr(M^{-1} W^T S W)) / 4.
pub fn trace_c_inv_s_woodbury(w: &Mat, s: &Mat) -> Result<f64, ClosedFormError> {
    let d = s.rows();
    if w.rows() != d || s.cols() != d {
        return Err(ClosedFormError::Shape("bad W or S".into()));
    }
    let kappa = w.cols();
    let mut m = w.matmul_tn(w);
    for i in 0..kappa {
        m.set(i, i, m.get(i, i) + 4.0);
    }
    let sw = s.matmul(w);
    let wsw = w.matmul_tn(&sw);
    let x = spd_solve(&m, &wsw)?;
    let tr_s: f64 = (0..d).map(|i| s.get(i, i)).sum();
    let tr_inner: f64 = (0..kappa).map(|i| x.get(i, i)).sum();
    Ok(0.25 * (tr_s - tr_inner))
}

/// tr(C^{-1} S) by dense factorization, the reference for the Woodbury path.
pub fn trace_c_inv_s_dense(w: &Mat, s: &Mat) -> Result<f64, ClosedFormError> {
    let d = s.rows();
    let mut c = w.matmul_nt(w);
    for i in 0..d {
        c.set(i, i, c.get(i, i) + 4.0);
    }
    let x = spd_solve(&c, s)?;
    Ok((0..d).map(|i| x.get(i, i)).sum())
}

/// Eigenvalues of S eligible for a nonzero decoder column (strictly above 4),
/// in descending order, together with their count.
pub fn select_latent_dim(s: &Mat) -> Result<(usize, Vec<f64>), ClosedFormError> {
    let eig = eig_sym_desc(s)?;
    let eligible: Vec<f64> = eig
        .eigenvalues
        .iter()
        .copied()
        .take_while(|&lam| lam > 4.0)
        .collect();
    Ok((eligible.len(), eligible))
}

/// The analytic optimum of the lower bound for one dataset.
#[derive(Debug, Clone)]
pub struct ClosedFormSolution {
    /// Optimal decoder weights, d x kappa.
    pub w_hat: Mat,
    /// Optimal decoder bias.
    pub b_hat: Vec<f64>,
    /// Optimal encoder covariance, kappa x kappa.
    pub sigma_z_hat: Mat,
    /// All eigenvalues of S, descending.
    pub eigenvalues: Vec<f64>,
    /// The bound value L-hat at the optimum.
    pub bound: f64,
    /// Latent dimension used.
    pub kappa: usize,
}

impl ClosedFormSolution {
    pub fn compute(y: &CenteredData, kappa: usize) -> Result<Self, ClosedFormError> {
        if kappa > y.d() {
            return Err(ClosedFormError::KappaTooLarge { kappa, d: y.d() });
        }
        let b_hat = sample_mean_b(y)?;
        let s = sample_cov_s(y, &b_hat)?;
        let eig = eig_sym_desc(&s)?;
        let w_hat = optimal_w_from_eigen(&eig, kappa)?;
        let sigma_z_hat = optimal_sigma_z(&w_hat)?;
        let bound = elbo_lower_bound(&w_hat, &b_hat, y)?;
        Ok(Self {
            w_hat,
            b_hat,
            sigma_z_hat,
            eigenvalues: eig.eigenvalues,
            bound,
            kappa,
        })
    }

    /// log of the diagonal of Sigma_z, the values the frozen variance head produces.
    pub fn log_diag_sigma_z(&self) -> Vec<f64> {
        (0..self.kappa)
            .map(|i| self.sigma_z_hat.get(i, i).ln())
            .collect()
    }
}
