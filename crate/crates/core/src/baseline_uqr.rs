//! Single-response quantile regression under the asymmetric Laplace
//! likelihood, used as the marginal-by-marginal comparison for joint fits.

use nalgebra::{DMatrix, DVector};

use crate::em_fitter::{fit_em, Dataset, FitOptions};
use crate::error::Result;
use crate::mal_dist::build_spec;

#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateFit {
    pub beta: DVector<f64>,
    pub delta: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximum-likelihood AL regression of `y` on `x` at level `tau`; the
/// one-response case of the joint EM.
pub fn fit_univariate_qr(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    tau: f64,
    opts: &FitOptions,
) -> Result<UnivariateFit> {
    let spec = build_spec(&[tau])?;
    let data = Dataset::new(DMatrix::from_column_slice(y.len(), 1, y.as_slice()), x.clone())?;
    let fit = fit_em(&data, &spec, opts)?;
    Ok(UnivariateFit {
        beta: fit.params.beta.row(0).transpose(),
        delta: fit.params.delta[0],
        loglik: fit.loglik(),
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

/// Fits every response of `data` separately at its own level.
pub fn fit_marginals(data: &Dataset, levels: &[f64], opts: &FitOptions) -> Result<Vec<UnivariateFit>> {
    (0..data.p())
        .map(|j| {
            let y = data.responses().column(j).into_owned();
            fit_univariate_qr(&y, data.design(), levels[j], opts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mal_dist::check_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tight() -> FitOptions {
        FitOptions {
            max_iter: 20_000,
            tol: 1e-13,
            param_tol: 1e-12,
            ..FitOptions::default()
        }
    }

    /// Exhaustive search over the basic solutions: some optimum of the check
    /// loss interpolates `k` observations.
    fn lp_oracle(y: &DVector<f64>, x: &DMatrix<f64>, tau: f64) -> DVector<f64> {
        let (n, k) = x.shape();
        let mut best = (f64::INFINITY, DVector::zeros(k));
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let sub = x.select_rows(&idx);
            if let Some(inv) = sub.clone().try_inverse() {
                let b = inv * y.select_rows(&idx);
                let loss: f64 = (0..n).map(|i| check_loss(y[i] - (x.row(i) * &b)[0], tau)).sum();
                if loss < best.0 {
                    best = (loss, b);
                }
            }
            let mut i = k;
            loop {
                if i == 0 {
                    return best.1;
                }
                i -= 1;
                if idx[i] < n - k + i {
                    break;
                }
            }
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }

    fn random_problem(seed: u64, n: usize) -> (DVector<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, s| if s == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = rng.random_range(-1.0f64..1.0).powi(3) * 2.0;
            0.5 + x[(i, 1)] - 0.7 * x[(i, 2)] + e
        });
        (y, x)
    }

    #[test]
    fn symmetric_median_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DMatrix::from_fn(400, 2, |i, s| if s == 0 { 1.0 } else { (i / 2) as f64 / 100.0 });
        let mut e = 0.0;
        let y = DVector::from_fn(400, |i, _| {
            if i % 2 == 0 {
                e = rng.random_range(-1.0..1.0);
            } else {
                e = -e;
            }
            1.0 + 2.0 * x[(i, 1)] + e
        });
        let fit = fit_univariate_qr(&y, &x, 0.5, &tight()).unwrap();
        assert!((fit.beta[0] - 1.0).abs() < 0.1 && (fit.beta[1] - 2.0).abs() < 0.05, "{}", fit.beta);
    }

    #[test]
    fn matches_exhaustive_check_loss_minimizer() {
        for (seed, tau) in [(1, 0.5), (2, 0.25), (3, 0.8)] {
            let (y, x) = random_problem(seed, 35);
            let oracle = lp_oracle(&y, &x, tau);
            let fit = fit_univariate_qr(&y, &x, tau, &tight()).unwrap();
            assert!((&fit.beta - &oracle).amax() < 1e-4, "tau {tau}: {} vs {}", fit.beta, oracle);
        }
    }

    #[test]
    fn residual_sign_fraction() {
        for (seed, tau) in [(4, 0.3), (5, 0.5), (6, 0.9)] {
            let (y, x) = random_problem(seed, 200);
            let fit = fit_univariate_qr(&y, &x, tau, &tight()).unwrap();
            let neg = (0..200).filter(|&i| y[i] - (x.row(i) * &fit.beta)[0] < -1e-9).count() as f64 / 200.0;
            let slack = 4.0 / 200.0;
            assert!(neg >= tau - slack && neg <= tau + slack, "{neg}");
        }
    }

    #[test]
    fn scale_equivariance() {
        let (y, x) = random_problem(7, 60);
        let opts = tight();
        let a = fit_univariate_qr(&y, &x, 0.4, &opts).unwrap();
        let b = fit_univariate_qr(&(&y * 3.0), &x, 0.4, &opts).unwrap();
        assert!((&b.beta - &a.beta * 3.0).amax() < 1e-6);
        assert!((b.delta - 3.0 * a.delta).abs() < 1e-6);
    }

    #[test]
    fn monotone_trace() {
        let (y, x) = random_problem(8, 80);
        let spec = build_spec(&[0.7]).unwrap();
        let data = Dataset::new(DMatrix::from_column_slice(80, 1, y.as_slice()), x).unwrap();
        let fit = fit_em(&data, &spec, &FitOptions::default()).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }
}
