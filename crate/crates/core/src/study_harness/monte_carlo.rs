//! Monte-Carlo bias and RMSE of the joint and the univariate estimators.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::dgp::{simulate_dataset, DgpConfig};
use super::replication_rng;
use crate::baseline_uqr::fit_marginals;
use crate::em_fitter::{fit_em, FitOptions};
use crate::error::{Error, Result};
use crate::mal_dist::QuantileSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Joint,
    Univariate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodStats {
    pub mean: f64,
    /// `100·(mean − truth)/truth`.
    pub relative_bias_pct: f64,
    pub rmse: f64,
    /// Standard deviation of the estimates across replications.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientSummary {
    /// Response index, from 0.
    pub response: usize,
    /// Design column, 0 being the intercept.
    pub covariate: usize,
    pub truth: f64,
    pub joint: MethodStats,
    pub univariate: MethodStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub method: Method,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub config: DgpConfig,
    pub replications: usize,
    pub joint_used: usize,
    pub univariate_used: usize,
    /// Coefficients in (response, covariate) order.
    pub coefficients: Vec<CoefficientSummary>,
    pub failures: Vec<ReplicationFailure>,
}

impl McSummary {
    pub fn cell(&self, response: usize, covariate: usize) -> Option<&CoefficientSummary> {
        self.coefficients
            .iter()
            .find(|c| c.response == response && c.covariate == covariate)
    }
}

struct Replication {
    joint: std::result::Result<DMatrix<f64>, String>,
    univariate: std::result::Result<DMatrix<f64>, String>,
}

fn run_one(config: &DgpConfig, spec: &QuantileSpec, opts: &FitOptions, r: usize) -> Result<Replication> {
    let data = simulate_dataset(config, &mut replication_rng(config.seed, r as u64))?;
    let joint = match fit_em(&data, spec, opts) {
        Ok(fit) if fit.converged => Ok(fit.params.beta),
        Ok(fit) => Err(format!("no convergence after {} iterations", fit.iterations)),
        Err(e) => Err(e.to_string()),
    };
    let univariate = match fit_marginals(&data, spec.levels(), opts) {
        Ok(fits) => match fits.iter().position(|f| !f.converged) {
            Some(j) => Err(format!("response {j}: no convergence after {} iterations", fits[j].iterations)),
            None => Ok(DMatrix::from_fn(data.p(), data.k(), |j, s| fits[j].beta[s])),
        },
        Err(e) => Err(e.to_string()),
    };
    Ok(Replication { joint, univariate })
}

/// Summary statistics of one coefficient over the replications that kept
/// their estimate.
pub fn method_stats(estimates: &[f64], truth: f64) -> MethodStats {
    let b = estimates.len() as f64;
    if estimates.is_empty() {
        return MethodStats {
            mean: f64::NAN,
            relative_bias_pct: f64::NAN,
            rmse: f64::NAN,
            sd: f64::NAN,
        };
    }
    let mean = estimates.iter().sum::<f64>() / b;
    let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / b;
    let ss = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>();
    MethodStats {
        mean,
        relative_bias_pct: 100.0 * (mean - truth) / truth,
        rmse: mse.sqrt(),
        sd: if estimates.len() > 1 { (ss / (b - 1.0)).sqrt() } else { 0.0 },
    }
}

/// Simulates `b` datasets from `config` (replication `r` uses stream `r` of
/// the configured seed), fits each jointly and marginal by marginal, and
/// summarizes every coefficient. Replications whose fit fails or does not
/// converge are left out of that method's statistics and listed in
/// `failures`.
pub fn run_monte_carlo(config: &DgpConfig, b: usize, spec: &QuantileSpec, opts: &FitOptions) -> Result<McSummary> {
    if b < 2 {
        return Err(Error::Domain(format!("need at least 2 replications, got {b}")));
    }
    let own_spec = config.validate()?;
    if own_spec.levels() != spec.levels() {
        return Err(Error::Dimension(format!(
            "quantile levels {:?} differ from the configuration's {:?}",
            spec.levels(),
            config.tau_levels
        )));
    }
    let reps: Vec<Replication> = (0..b)
        .into_par_iter()
        .map(|r| run_one(config, spec, opts, r))
        .collect::<Result<_>>()?;
    let (p, k) = config.beta_true.shape();
    let mut failures = Vec::new();
    let mut joint = Vec::new();
    let mut univariate = Vec::new();
    for (r, rep) in reps.into_iter().enumerate() {
        for (method, outcome, kept) in [
            (Method::Joint, rep.joint, &mut joint),
            (Method::Univariate, rep.univariate, &mut univariate),
        ] {
            match outcome {
                Ok(beta) => kept.push(beta),
                Err(reason) => failures.push(ReplicationFailure {
                    replication: r,
                    method,
                    reason,
                }),
            }
        }
    }
    let mut coefficients = Vec::with_capacity(p * k);
    for j in 0..p {
        for s in 0..k {
            let truth = config.beta_true[(j, s)];
            let pick = |fits: &[DMatrix<f64>]| fits.iter().map(|m| m[(j, s)]).collect::<Vec<_>>();
            coefficients.push(CoefficientSummary {
                response: j,
                covariate: s,
                truth,
                joint: method_stats(&pick(&joint), truth),
                univariate: method_stats(&pick(&univariate), truth),
            });
        }
    }
    Ok(McSummary {
        config: config.clone(),
        replications: b,
        joint_used: joint.len(),
        univariate_used: univariate.len(),
        coefficients,
        failures,
    })
}
