//! Nonparametric bootstrap standard errors.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::replication_rng;
use crate::em_fitter::{fit_em, Dataset, FitOptions};
use crate::error::{Error, Result};
use crate::mal_dist::QuantileSpec;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapFailure {
    pub resample: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapResult {
    /// p×k sample standard deviations of the kept estimates.
    #[serde(with = "super::dgp::matrix_rows")]
    pub se: DMatrix<f64>,
    /// One row per kept resample; column `j·k + s` holds `β̂_js`.
    #[serde(with = "super::dgp::matrix_rows")]
    pub replicates: DMatrix<f64>,
    /// Requested resamples.
    pub b: usize,
    pub used: usize,
    pub seed: u64,
    pub failures: Vec<BootstrapFailure>,
}

/// `n` row indices drawn uniformly with replacement.
pub fn resample_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Refits the joint model on `b` row resamples (resample `r` draws from
/// stream `r` of `seed`) and reports the spread of `β̂`. Resamples whose fit
/// fails or does not converge are excluded and listed.
pub fn bootstrap_se(data: &Dataset, spec: &QuantileSpec, b: usize, opts: &FitOptions, seed: u64) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(Error::Domain(format!("need at least 2 resamples, got {b}")));
    }
    let (p, k) = (data.p(), data.k());
    let fits: Vec<std::result::Result<DMatrix<f64>, String>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let rows = resample_indices(data.n(), &mut replication_rng(seed, r as u64));
            let sample = data.select_rows(&rows).map_err(|e| e.to_string())?;
            match fit_em(&sample, spec, opts) {
                Ok(fit) if fit.converged => Ok(fit.params.beta),
                Ok(fit) => Err(format!("no convergence after {} iterations", fit.iterations)),
                Err(e) => Err(e.to_string()),
            }
        })
        .collect();
    let mut kept = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in fits.into_iter().enumerate() {
        match f {
            Ok(beta) => kept.push(beta),
            Err(reason) => failures.push(BootstrapFailure { resample: r, reason }),
        }
    }
    if kept.len() < 2 {
        return Err(Error::Domain(format!(
            "only {} of {b} resamples converged; no standard error available",
            kept.len()
        )));
    }
    let replicates = DMatrix::from_fn(kept.len(), p * k, |r, c| kept[r][(c / k, c % k)]);
    let m = kept.len() as f64;
    let se = DMatrix::from_fn(p, k, |j, s| {
        let col = replicates.column(j * k + s);
        let mean = col.mean();
        (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    });
    Ok(BootstrapResult {
        se,
        replicates,
        b,
        used: kept.len(),
        seed,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study_harness::dgp::{simulate_dataset, DgpConfig};

    fn small_data(n: usize) -> (Dataset, QuantileSpec) {
        let mut config = DgpConfig::preset("table1-panelB").unwrap();
        config.n = n;
        let spec = config.spec().unwrap();
        (simulate_dataset(&config, &mut replication_rng(5, 0)).unwrap(), spec)
    }

    #[test]
    fn indices_stay_in_range() {
        let idx = resample_indices(7, &mut replication_rng(1, 0));
        assert_eq!(idx.len(), 7);
        assert!(idx.iter().all(|&i| i < 7));
    }

    #[test]
    fn same_seed_same_result_and_nonnegative_se() {
        let (data, spec) = small_data(150);
        let a = bootstrap_se(&data, &spec, 4, &FitOptions::default(), 11).unwrap();
        let b = bootstrap_se(&data, &spec, 4, &FitOptions::default(), 11).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.se.iter().all(|&v| v >= 0.0));
        assert_eq!(a.replicates.shape(), (a.used, 9));
        assert_eq!(a.used + a.failures.len(), 4);
        assert!(bootstrap_se(&data, &spec, 1, &FitOptions::default(), 11).is_err());
    }
}
