//! The Bernoulli-VAE objective and the Taylor expansion behind the bound.
//!
//! `negative_elbo_batch` is the training loss (KL minus reconstruction,
//! averaged over the batch). `evaluate_closed_form_elbo` plugs the closed-form
//! encoder moments and the affine-sigmoid decoder into the exact objective by
//! Monte Carlo, which is how the bound inequality is verified numerically.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::closedform::{CenteredData, ClosedFormSolution};
use crate::datagen::sigmoid;
use crate::numerics::{pairwise_sum, Cholesky, Mat, NumericsError};
use crate::rng::rng_from_seed;

/// Probabilities are clamped to [EPS, 1 - EPS] inside the likelihood only.
pub const PROB_CLAMP_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ElboError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// The two pieces of the objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    /// Monte-Carlo estimate of the reconstruction term E_q[log P(x|z)].
    pub recon: f64,
    /// Exact KL divergence to the standard normal prior.
    pub kl: f64,
    /// kl - recon, the training loss.
    pub neg_elbo: f64,
}

/// log P(x | p) for one binary observation, probabilities clamped at 1e-12.
pub fn bernoulli_log_likelihood(x: &[f64], p: &[f64]) -> Result<f64, ElboError> {
    if x.len() != p.len() {
        return Err(ElboError::Shape(format!(
            "x has {} entries, p has {}",
            x.len(),
            p.len()
        )));
    }
    let mut acc = 0.0;
    for (j, (&xj, &pj)) in x.iter().zip(p).enumerate() {
        if !xj.is_finite() || !pj.is_finite() {
            return Err(ElboError::NonFinite(j));
        }
        let pc = pj.clamp(PROB_CLAMP_EPS, 1.0 - PROB_CLAMP_EPS);
        acc += xj * pc.ln() + (1.0 - xj) * (1.0 - pc).ln();
    }
    Ok(acc)
}

/// KL(N(mu, diag(exp(log_var))) || N(0, I)), nonnegative.
pub fn kl_diag_gaussian(mu: &[f64], log_var: &[f64]) -> f64 {
    debug_assert_eq!(mu.len(), log_var.len());
    let mut acc = 0.0;
    for (&m, &lv) in mu.iter().zip(log_var) {
        acc += lv.exp() - lv + m * m - 1.0;
    }
    (0.5 * acc).max(0.0)
}

/// Mean over the batch of [KL - log-likelihood]: the reported training loss.
pub fn negative_elbo_batch(
    x: &Mat,
    mu: &Mat,
    log_var: &Mat,
    p: &Mat,
) -> Result<f64, ElboError> {
    let batch = x.rows();
    if mu.rows() != batch || log_var.rows() != batch || p.rows() != batch {
        return Err(ElboError::Shape("batch sizes differ".into()));
    }
    if p.cols() != x.cols() || mu.cols() != log_var.cols() {
        return Err(ElboError::Shape("feature dimensions differ".into()));
    }
    let per_datum: Vec<f64> = (0..batch)
        .map(|i| {
            let kl = kl_diag_gaussian(mu.row(i), log_var.row(i));
            let ll = bernoulli_log_likelihood(x.row(i), p.row(i))?;
            Ok(kl - ll)
        })
        .collect::<Result<_, ElboError>>()?;
    Ok(pairwise_sum(&per_datum) / batch as f64)
}

/// Numerically stable softplus, log(1 + e^z).
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// The degree-2 Taylor expansion of g(z) = log(1 - sigmoid(z)) around zero.
#[derive(Debug, Clone, Copy)]
pub struct TaylorG {
    /// g(z) computed stably as -softplus(z).
    pub exact: f64,
    /// -log 2 - z/2 - z^2/8.
    pub degree2: f64,
    /// exact - degree2; nonnegative for every real z.
    pub remainder: f64,
}

pub fn taylor_g(z: f64) -> TaylorG {
    let exact = -softplus(z);
    let degree2 = -std::f64::consts::LN_2 - 0.5 * z - 0.125 * z * z;
    TaylorG {
        exact,
        degree2,
        remainder: exact - degree2,
    }
}

/// Third derivative of g: e^z (e^z - 1) / (1 + e^z)^3, written via sigmoids.
///
/// Point symmetric, with extrema +-1/(6 sqrt(3)) at z = log(2 +- sqrt(3)).
pub fn g_third_derivative(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s) * (2.0 * s - 1.0)
}

/// Monte-Carlo evaluation of the exact objective at the closed-form optimum.
///
/// For each observation the encoder moments are the analytic `mu_hat` and
/// `Sigma_z_hat`; the decoder is `p = sigmoid(W z + b)`. Draws consume the
/// seeded stream datum by datum, `samples` draws each. Returns the average
/// ELBO estimate and its Monte-Carlo standard error (infinite when
/// `samples == 1`, since one draw carries no variance information).
pub fn evaluate_closed_form_elbo(
    y: &CenteredData,
    sol: &ClosedFormSolution,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), ElboError> {
    let d = y.d();
    let n = y.n();
    let kappa = sol.kappa;
    if sol.w_hat.rows() != d || sol.b_hat.len() != d {
        return Err(ElboError::Shape("solution does not match data dimension".into()));
    }
    if samples == 0 {
        return Err(ElboError::Shape("need at least one Monte-Carlo sample".into()));
    }

    // Factor Sigma_z once: sampling uses z = mu + L eps, KL uses trace/logdet.
    let chol_sigma = Cholesky::decompose(&sol.sigma_z_hat)?;
    let log_det_sigma = chol_sigma.log_det();
    let trace_sigma: f64 = (0..kappa).map(|i| sol.sigma_z_hat.get(i, i)).sum();

    // mu_hat = P (y - b/4) with P = Sigma_z W^T.
    let p_mat = {
        let wt = sol.w_hat.transpose();
        sol.sigma_z_hat.matmul(&wt)
    };

    let mut rng = rng_from_seed(seed);
    let mut yrow = vec![0.0; d];
    let mut xrow = vec![0.0; d];
    let mut probs = vec![0.0; d];
    let mut eps = vec![0.0; kappa];
    let mut per_datum = Vec::with_capacity(n);
    let mut per_datum_var = Vec::with_capacity(n);
    let mut draws = vec![0.0; samples];

    for i in 0..n {
        y.fill_row_y(i, &mut yrow);
        for j in 0..d {
            xrow[j] = yrow[j] + 0.5;
        }
        let t: Vec<f64> = yrow
            .iter()
            .zip(&sol.b_hat)
            .map(|(&yj, &bj)| yj - 0.25 * bj)
            .collect();
        let mu = p_mat.matvec(&t);
        let mu_norm2: f64 = mu.iter().map(|m| m * m).sum();
        let kl = 0.5 * (trace_sigma + mu_norm2 - kappa as f64 - log_det_sigma);

        for draw in draws.iter_mut() {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            let noise = chol_sigma.factor_mul(&eps);
            let z: Vec<f64> = mu.iter().zip(&noise).map(|(m, n)| m + n).collect();
            let logits = sol.w_hat.matvec(&z);
            for (pj, (lj, bj)) in probs.iter_mut().zip(logits.iter().zip(&sol.b_hat)) {
                *pj = sigmoid(lj + bj);
            }
            *draw = bernoulli_log_likelihood(&xrow, &probs)?;
        }
        let mean_ll = pairwise_sum(&draws) / samples as f64;
        per_datum.push(mean_ll - kl);
        if samples >= 2 {
            let var = draws
                .iter()
                .map(|&v| (v - mean_ll) * (v - mean_ll))
                .sum::<f64>()
                / (samples - 1) as f64;
            per_datum_var.push(var);
        }
    }

    let estimate = pairwise_sum(&per_datum) / n as f64;
    let std_err = if samples >= 2 {
        (pairwise_sum(&per_datum_var) / (samples as f64 * (n as f64) * (n as f64))).sqrt()
    } else {
        f64::INFINITY
    };
    Ok((estimate, std_err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedform::{center_targets, ClosedFormSolution};
    use crate::datagen::{generate_dataset, GenConfig};
    use rand::Rng;

    #[test]
    fn log_likelihood_half_probs() {
        let ll = bernoulli_log_likelihood(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((ll + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_clamping_edge() {
        // Saturated probabilities that agree with x: the clamp keeps the value
        // finite and essentially zero.
        let ll = bernoulli_log_likelihood(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(ll <= 0.0);
        assert!(ll >= 2.0 * (1.0 - PROB_CLAMP_EPS).ln() - 1e-15);
    }

    #[test]
    fn log_likelihood_matches_elementwise_oracle() {
        let mut rng = rng_from_seed(1);
        let x: Vec<f64> = (0..20)
            .map(|_| if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 })
            .collect();
        let p: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..0.99)).collect();
        let ll = bernoulli_log_likelihood(&x, &p).unwrap();
        let want: f64 = x
            .iter()
            .zip(&p)
            .map(|(&xj, &pj)| xj * pj.ln() + (1.0 - xj) * (1.0 - pj).ln())
            .sum();
        assert!((ll - want).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_rejects_nan() {
        assert!(bernoulli_log_likelihood(&[1.0], &[f64::NAN]).is_err());
        assert!(bernoulli_log_likelihood(&[f64::NAN], &[0.5]).is_err());
    }

    #[test]
    fn kl_standard_normal_is_zero() {
        assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn kl_mean_shift() {
        assert!((kl_diag_gaussian(&[1.0, 0.0], &[0.0, 0.0]) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn kl_variance_term() {
        // Variances (e, 1): KL = (e - 2) / 2.
        let kl = kl_diag_gaussian(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((kl - (std::f64::consts::E - 2.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_random() {
        let mut rng = rng_from_seed(2);
        for _ in 0..10_000 {
            let mu: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let lv: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let kl = kl_diag_gaussian(&mu, &lv);
            assert!(kl >= 0.0);
            if mu.iter().all(|&m| m == 0.0) && lv.iter().all(|&v| v == 0.0) {
                assert_eq!(kl, 0.0);
            } else {
                assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn batch_loss_trivial_case() {
        let d = 6;
        let x = Mat::zeros(1, d);
        let mu = Mat::zeros(1, 2);
        let lv = Mat::zeros(1, 2);
        let mut p = Mat::zeros(1, d);
        for j in 0..d {
            p.set(0, j, 0.5);
        }
        let loss = negative_elbo_batch(&x, &mu, &lv, &p).unwrap();
        assert!((loss - d as f64 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_bounded_below_by_recon() {
        let mut rng = rng_from_seed(3);
        let (batch, d, kappa) = (5, 8, 2);
        let mut x = Mat::zeros(batch, d);
        let mut p = Mat::zeros(batch, d);
        let mut mu = Mat::zeros(batch, kappa);
        let mut lv = Mat::zeros(batch, kappa);
        for i in 0..batch {
            for j in 0..d {
                x.set(i, j, if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 });
                p.set(i, j, rng.random_range(0.05..0.95));
            }
            for j in 0..kappa {
                mu.set(i, j, rng.random_range(-1.0..1.0));
                lv.set(i, j, rng.random_range(-1.0..1.0));
            }
        }
        let loss = negative_elbo_batch(&x, &mu, &lv, &p).unwrap();
        let mean_neg_ll: f64 = (0..batch)
            .map(|i| -bernoulli_log_likelihood(x.row(i), p.row(i)).unwrap())
            .sum::<f64>()
            / batch as f64;
        assert!(loss >= mean_neg_ll - 1e-12, "kl is nonnegative");

        // Per-datum loop oracle.
        let mut acc = 0.0;
        for i in 0..batch {
            acc += kl_diag_gaussian(mu.row(i), lv.row(i))
                - bernoulli_log_likelihood(x.row(i), p.row(i)).unwrap();
        }
        assert!((loss - acc / batch as f64).abs() < 1e-12);
    }

    #[test]
    fn taylor_at_expansion_point() {
        let t = taylor_g(0.0);
        assert!((t.exact + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(t.remainder.abs() < 1e-15);
    }

    #[test]
    fn taylor_remainder_positive_at_three() {
        assert!(taylor_g(3.0).remainder > 0.0);
        assert!(taylor_g(-3.0).remainder > 0.0);
    }

    #[test]
    fn taylor_remainder_nonnegative_sampled() {
        for k in 0..10_000 {
            let z = -30.0 + 60.0 * (k as f64) / 9_999.0;
            assert!(
                taylor_g(z).remainder >= -1e-12,
                "remainder negative at z = {z}"
            );
        }
        // Heavy-tail draws reach far outside the grid.
        let mut rng = rng_from_seed(55);
        for _ in 0..1000 {
            let u: f64 = rng.random_range(-1.55..1.55);
            let z = u.tan() * 10.0;
            assert!(
                taylor_g(z).remainder >= -1e-12,
                "remainder negative at heavy-tail z = {z}"
            );
        }
    }

    #[test]
    fn third_derivative_extrema() {
        let z_star = (2.0 + 3.0_f64.sqrt()).ln();
        let v_star = 1.0 / (6.0 * 3.0_f64.sqrt());
        assert!((g_third_derivative(z_star) - v_star).abs() < 1e-12);
        assert!((g_third_derivative(-z_star) + v_star).abs() < 1e-12);
        // Point symmetry.
        for z in [0.3, 1.1, 2.7] {
            assert!((g_third_derivative(z) + g_third_derivative(-z)).abs() < 1e-15);
        }
    }

    #[test]
    fn mc_elbo_zero_parameters() {
        let cfg = GenConfig::new(20, 20, 1, 4).unwrap();
        let ds = generate_dataset(&cfg).unwrap();
        let y = center_targets(&ds);
        let sol = ClosedFormSolution {
            w_hat: Mat::zeros(20, 2),
            b_hat: vec![0.0; 20],
            sigma_z_hat: Mat::identity(2),
            eigenvalues: vec![0.0; 20],
            bound: -20.0 * std::f64::consts::LN_2,
            kappa: 2,
        };
        let (est, se) = evaluate_closed_form_elbo(&y, &sol, 8, 9).unwrap();
        assert!((est + 20.0 * std::f64::consts::LN_2).abs() < 1e-10);
        assert!(se.abs() < 1e-12, "p is constant 1/2, so no MC noise");
    }

    #[test]
    fn mc_elbo_respects_bound() {
        for seed in 0..5u64 {
            let cfg = GenConfig::new(120, 25, 1, 100 + seed).unwrap();
            let ds = generate_dataset(&cfg).unwrap();
            let y = center_targets(&ds);
            let sol = ClosedFormSolution::compute(&y, 2).unwrap();
            let (est, se) = evaluate_closed_form_elbo(&y, &sol, 64, seed).unwrap();
            assert!(
                est >= sol.bound - 3.0 * se,
                "seed {seed}: estimate {est} below bound {} - 3 * {se}",
                sol.bound
            );
        }
    }

    #[test]
    fn mc_std_err_scaling() {
        let cfg = GenConfig::new(60, 20, 1, 11).unwrap();
        let ds = generate_dataset(&cfg).unwrap();
        let y = center_targets(&ds);
        let sol = ClosedFormSolution::compute(&y, 1).unwrap();
        let (_, se_small) = evaluate_closed_form_elbo(&y, &sol, 64, 1).unwrap();
        let (_, se_big) = evaluate_closed_form_elbo(&y, &sol, 128, 1).unwrap();
        let ratio = se_small / se_big;
        assert!(
            ratio > 1.2 && ratio < 1.7,
            "doubling samples should shrink the error by about sqrt(2), ratio {ratio}"
        );
    }
}
