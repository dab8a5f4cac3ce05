use rayon::prelude::*;

use super::{Mat, NumericsError};

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
///
/// Column `j` of `eigenvectors` pairs with `eigenvalues[j]`. The sign of each
/// eigenvector is fixed so that its entry of largest magnitude is nonnegative
/// (first such index on ties), which makes the decomposition reproducible.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Mat,
}

impl SymEigen {
    /// U * diag(lambda) * U^T, for reconstruction checks.
    pub fn reconstruct(&self) -> Mat {
        let n = self.eigenvalues.len();
        let u = &self.eigenvectors;
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for (k, &lam) in self.eigenvalues.iter().enumerate() {
                    s += u.get(i, k) * lam * u.get(j, k);
                }
                out.set(i, j, s);
            }
        }
        out
    }
}

const MAX_SWEEPS: usize = 100;
/// Off-diagonal convergence tolerance, relative to the Frobenius norm of the input.
const OFF_TOL_REL: f64 = 1e-12;
/// Absolute symmetry tolerance on the input.
const SYMMETRY_TOL: f64 = 1e-10;
/// Row count above which the update passes run on the Rayon pool. The per-entry
/// arithmetic is identical either way, so results do not depend on thread count.
const PAR_THRESHOLD: usize = 256;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Rotations are applied in a fixed round-robin (tournament) order; within a
/// round the index pairs are disjoint, so the round is one exact orthogonal
/// similarity regardless of evaluation order. Iteration stops when the
/// off-diagonal norm falls below `1e-12 * ||S||_F`, capped at 100 sweeps.
pub fn eig_sym_desc(s: &Mat) -> Result<SymEigen, NumericsError> {
    let n = s.rows();
    if s.cols() != n {
        return Err(NumericsError::NotSquare {
            rows: n,
            cols: s.cols(),
        });
    }
    if let Some((row, col)) = s.first_non_finite() {
        return Err(NumericsError::NonFinite { row, col });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = (s.get(i, j) - s.get(j, i)).abs();
            if delta > SYMMETRY_TOL {
                return Err(NumericsError::NotSymmetric { row: i, col: j, delta });
            }
        }
    }
    if n == 0 {
        return Ok(SymEigen {
            eigenvalues: Vec::new(),
            eigenvectors: Mat::zeros(0, 0),
        });
    }

    // Work on the exactly-symmetrized copy.
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, 0.5 * (s.get(i, j) + s.get(j, i)));
        }
    }
    let mut v = Mat::identity(n);

    let fro = a.frobenius_norm();
    let tol = OFF_TOL_REL * fro;

    if n > 1 && fro > 0.0 {
        let mut converged = off_diag_norm(&a) <= tol;
        let mut sweeps = 0;
        while !converged {
            if sweeps == MAX_SWEEPS {
                return Err(NumericsError::NoConvergence {
                    sweeps,
                    off: off_diag_norm(&a),
                });
            }
            jacobi_sweep(&mut a, &mut v, tol);
            mirror_upper_to_lower(&mut a);
            sweeps += 1;
            converged = off_diag_norm(&a) <= tol;
        }
    }

    // Sort descending; ties broken by original index so the result is total-ordered.
    let raw: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| raw[j].total_cmp(&raw[i]).then(i.cmp(&j)));

    let eigenvalues: Vec<f64> = order.iter().map(|&j| raw[j]).collect();
    let mut eigenvectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        // Sign convention: largest-magnitude entry nonnegative.
        let mut best = 0.0_f64;
        let mut best_i = 0;
        for i in 0..n {
            let mag = v.get(i, src).abs();
            if mag > best {
                best = mag;
                best_i = i;
            }
        }
        let flip = if v.get(best_i, src) < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            eigenvectors.set(i, dst, flip * v.get(i, src));
        }
    }

    Ok(SymEigen {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diag_norm(a: &Mat) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let x = a.get(i, j);
            s += x * x;
        }
    }
    (2.0 * s).sqrt()
}

fn mirror_upper_to_lower(a: &mut Mat) {
    let n = a.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let x = a.get(i, j);
            a.set(j, i, x);
        }
    }
}

struct Rotation {
    p: usize,
    q: usize,
    c: f64,
    s: f64,
}

/// One full sweep: n-1 tournament rounds covering every index pair once.
fn jacobi_sweep(a: &mut Mat, v: &mut Mat, tol: f64) {
    let n = a.rows();
    let m = n + (n & 1); // pad to even for the round-robin schedule
    // Entries at or below tol/n can be left alone: even if every off-diagonal
    // entry sits at that level the off-diagonal norm is already below tol.
    let skip = tol / n as f64;

    for round in 0..m - 1 {
        let mut rotations = Vec::with_capacity(m / 2);
        for game in 0..m / 2 {
            let x = if game == 0 {
                m - 1
            } else {
                (round + game) % (m - 1)
            };
            let y = (round + (m - 1) - game) % (m - 1);
            if x >= n || y >= n {
                continue; // bye when n is odd
            }
            let (p, q) = if x < y { (x, y) } else { (y, x) };
            let apq = a.get(p, q);
            if apq.abs() <= skip {
                continue;
            }
            let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
            let t = if tau >= 0.0 {
                1.0 / (tau + (1.0 + tau * tau).sqrt())
            } else {
                1.0 / (tau - (1.0 + tau * tau).sqrt())
            };
            let c = 1.0 / (1.0 + t * t).sqrt();
            rotations.push(Rotation { p, q, c, s: t * c });
        }
        if rotations.is_empty() {
            continue;
        }
        apply_round(a, v, &rotations);
    }
}

/// Applies one round of disjoint rotations: A <- J^T A J, V <- V J.
fn apply_round(a: &mut Mat, v: &mut Mat, rotations: &[Rotation]) {
    let n = a.rows();

    // Left multiply by J^T: combine the two rows of each rotation.
    for rot in rotations {
        let (row_p, row_q) = a.two_rows_mut(rot.p, rot.q);
        rotate_pair(row_p, row_q, rot.c, rot.s);
    }

    // Right multiply by J: per matrix row, combine the two affected columns.
    let col_update = |row: &mut [f64]| {
        for rot in rotations {
            let x = row[rot.p];
            let y = row[rot.q];
            row[rot.p] = rot.c * x - rot.s * y;
            row[rot.q] = rot.s * x + rot.c * y;
        }
    };
    if n >= PAR_THRESHOLD {
        a.as_mut_slice().par_chunks_mut(n).for_each(col_update);
        v.as_mut_slice().par_chunks_mut(n).for_each(col_update);
    } else {
        for i in 0..n {
            col_update(a.row_mut(i));
        }
        for i in 0..n {
            col_update(v.row_mut(i));
        }
    }

    // Each pivot entry is annihilated exactly by its own rotation.
    for rot in rotations {
        a.set(rot.p, rot.q, 0.0);
        a.set(rot.q, rot.p, 0.0);
    }
}

#[inline]
fn rotate_pair(row_p: &mut [f64], row_q: &mut [f64], c: f64, s: f64) {
    for (xp, xq) in row_p.iter_mut().zip(row_q.iter_mut()) {
        let x = *xp;
        let y = *xq;
        *xp = c * x - s * y;
        *xq = s * x + c * y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_symmetric(n: usize, seed: u64) -> Mat {
        let mut rng = rng_from_seed(seed);
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let x: f64 = rng.random_range(-2.0..2.0);
                m.set(i, j, x);
                m.set(j, i, x);
            }
        }
        m
    }

    #[test]
    fn diagonal_input_sorted() {
        let s = Mat::diag(&[3.0, 1.0, 2.0]);
        let eig = eig_sym_desc(&s).unwrap();
        assert_eq!(eig.eigenvalues, vec![3.0, 2.0, 1.0]);
        // Permuted identity columns with nonnegative leading entries.
        let u = &eig.eigenvectors;
        assert_eq!(u.get(0, 0), 1.0);
        assert_eq!(u.get(2, 1), 1.0);
        assert_eq!(u.get(1, 2), 1.0);
    }

    #[test]
    fn identity_input() {
        let eig = eig_sym_desc(&Mat::identity(4)).unwrap();
        for lam in &eig.eigenvalues {
            assert!((lam - 1.0).abs() < 1e-14);
        }
        let sign_ok = (0..4).all(|j| {
            let col: Vec<f64> = (0..4).map(|i| eig.eigenvectors.get(i, j)).collect();
            let best = col
                .iter()
                .enumerate()
                .max_by(|(i, a), (j, b)| a.abs().partial_cmp(&b.abs()).unwrap().then(j.cmp(i)))
                .unwrap();
            *best.1 >= 0.0
        });
        assert!(sign_ok);
    }

    #[test]
    fn reconstruction_random_6x6() {
        let s = random_symmetric(6, 42);
        let eig = eig_sym_desc(&s).unwrap();
        let rec = eig.reconstruct();
        let tol = 1e-8 * (1.0 + s.max_abs());
        for i in 0..6 {
            for j in 0..6 {
                assert!(
                    (rec.get(i, j) - s.get(i, j)).abs() <= tol,
                    "reconstruction off at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn orthonormality() {
        let s = random_symmetric(10, 7);
        let eig = eig_sym_desc(&s).unwrap();
        let u = &eig.eigenvectors;
        let gram = u.matmul_tn(u);
        for i in 0..10 {
            for j in 0..10 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn non_symmetric_rejected() {
        let mut s = Mat::identity(3);
        s.set(0, 1, 1e-6);
        let err = eig_sym_desc(&s).unwrap_err();
        assert!(matches!(err, NumericsError::NotSymmetric { .. }));
    }

    #[test]
    fn non_finite_rejected() {
        let mut s = Mat::identity(2);
        s.set(0, 0, f64::NAN);
        let err = eig_sym_desc(&s).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { .. }));
    }

    #[test]
    fn zero_matrix_ok() {
        let eig = eig_sym_desc(&Mat::zeros(3, 3)).unwrap();
        assert_eq!(eig.eigenvalues, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn bit_deterministic() {
        let s = random_symmetric(20, 1234);
        let a = eig_sym_desc(&s).unwrap();
        let b = eig_sym_desc(&s).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
        assert_eq!(a.eigenvectors.as_slice(), b.eigenvectors.as_slice());
    }

    #[test]
    fn parallel_path_matches_serial_arithmetic() {
        // A 300x300 matrix takes the par_chunks path; reconstruction must still hold.
        let s = random_symmetric(300, 5);
        let eig = eig_sym_desc(&s).unwrap();
        let rec = eig.reconstruct();
        let tol = 1e-8 * (1.0 + s.max_abs());
        let mut worst = 0.0_f64;
        for i in 0..300 {
            for j in 0..300 {
                worst = worst.max((rec.get(i, j) - s.get(i, j)).abs());
            }
        }
        assert!(worst <= tol, "worst reconstruction error {worst:e}");
    }
}
