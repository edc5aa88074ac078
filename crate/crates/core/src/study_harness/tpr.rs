//! True-positive rate of the penalized fit on designs with known zeros.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{simulate_dataset, DgpConfig};
use super::replication_rng;
use super::scaling::standardize;
use crate::em_fitter::FitOptions;
use crate::error::{Error, Result};
use crate::penalized_fitter::{cross_validate_with, lambda_grid, CvScore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TprSettings {
    pub folds: usize,
    pub grid_size: usize,
    /// Smallest grid value as a fraction of `λ_max`.
    pub ratio: f64,
    pub score: CvScore,
}

impl Default for TprSettings {
    fn default() -> Self {
        Self {
            folds: 10,
            grid_size: 100,
            ratio: 1e-3,
            score: CvScore::CheckLoss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TprCell {
    /// Response index, from 0.
    pub response: usize,
    /// Design column, 0 being the intercept.
    pub covariate: usize,
    /// Percentage of used replications with the estimate exactly zero.
    pub tpr_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TprFailure {
    pub replication: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TprSummary {
    pub config: DgpConfig,
    pub settings: TprSettings,
    pub replications: usize,
    pub used: usize,
    /// One cell per true zero, in (response, covariate) order.
    pub cells: Vec<TprCell>,
    pub average_tpr_pct: f64,
    /// Percentage of used replications keeping every true nonzero slope.
    pub nonzero_kept_pct: f64,
    /// Selected `λ` of each used replication.
    pub chosen_lambdas: Vec<f64>,
    pub failures: Vec<TprFailure>,
}

struct Outcome {
    zero: Vec<bool>,
    nonzero_kept: bool,
    lambda: f64,
}

/// Per replication: simulate, standardize the covariates, pick `λ` by K-fold
/// cross-validation over a log-spaced grid, refit at that `λ`, and record
/// which true zeros are estimated as exactly zero. Failed replications are
/// excluded and listed.
pub fn run_tpr_study(config: &DgpConfig, b: usize, settings: &TprSettings, opts: &FitOptions) -> Result<TprSummary> {
    if b == 0 {
        return Err(Error::Domain("need at least one replication".into()));
    }
    let spec = config.validate()?;
    let (p, k) = config.beta_true.shape();
    let zeros: Vec<(usize, usize)> = (0..p)
        .flat_map(|j| (1..k).map(move |s| (j, s)))
        .filter(|&(j, s)| config.beta_true[(j, s)] == 0.0)
        .collect();
    if zeros.is_empty() {
        return Err(Error::Input("the true coefficients contain no zero slope".into()));
    }
    let outcomes: Vec<std::result::Result<Outcome, String>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(config.seed, r as u64);
            let raw = simulate_dataset(config, &mut rng).map_err(|e| e.to_string())?;
            let (data, _) = standardize(&raw).map_err(|e| e.to_string())?;
            let grid = lambda_grid(&data, &spec, settings.grid_size, settings.ratio, opts).map_err(|e| e.to_string())?;
            let cv = cross_validate_with(&data, &spec, settings.folds, &grid, opts, &mut rng, settings.score)
                .map_err(|e| e.to_string())?;
            let beta = &cv.final_fit.params.beta;
            let nonzero_kept = (0..p)
                .flat_map(|j| (1..k).map(move |s| (j, s)))
                .filter(|&(j, s)| config.beta_true[(j, s)] != 0.0)
                .all(|(j, s)| beta[(j, s)] != 0.0);
            Ok(Outcome {
                zero: zeros.iter().map(|&(j, s)| beta[(j, s)] == 0.0).collect(),
                nonzero_kept,
                lambda: cv.chosen_lambda,
            })
        })
        .collect();
    let mut hits = vec![0usize; zeros.len()];
    let mut kept = 0usize;
    let mut chosen_lambdas = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                for (h, z) in hits.iter_mut().zip(&o.zero) {
                    *h += *z as usize;
                }
                kept += o.nonzero_kept as usize;
                chosen_lambdas.push(o.lambda);
            }
            Err(reason) => failures.push(TprFailure { replication: r, reason }),
        }
    }
    let used = chosen_lambdas.len();
    let pct = |count: usize| if used == 0 { f64::NAN } else { 100.0 * count as f64 / used as f64 };
    let cells: Vec<TprCell> = zeros
        .iter()
        .zip(&hits)
        .map(|(&(response, covariate), &h)| TprCell {
            response,
            covariate,
            tpr_pct: pct(h),
        })
        .collect();
    let average_tpr_pct = cells.iter().map(|c| c.tpr_pct).sum::<f64>() / cells.len() as f64;
    Ok(TprSummary {
        config: config.clone(),
        settings: settings.clone(),
        replications: b,
        used,
        cells,
        average_tpr_pct,
        nonzero_kept_pct: pct(kept),
        chosen_lambdas,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_replication_gives_six_binary_cells() {
        let mut config = DgpConfig::preset("table3-panelA").unwrap();
        config.n = 150;
        let settings = TprSettings {
            folds: 3,
            grid_size: 8,
            ratio: 1e-2,
            ..TprSettings::default()
        };
        let s = run_tpr_study(&config, 1, &settings, &FitOptions::default()).unwrap();
        assert_eq!(s.cells.len(), 6);
        let at = |j, c| s.cells.iter().any(|x| x.response == j && x.covariate == c);
        assert!(at(0, 2) && at(0, 4) && at(1, 3) && at(1, 4) && at(2, 2) && at(2, 3));
        if s.used == 1 {
            assert!(s.cells.iter().all(|c| c.tpr_pct == 0.0 || c.tpr_pct == 100.0));
        }
        assert!(s.cells.iter().all(|c| !(c.tpr_pct < 0.0) && !(c.tpr_pct > 100.0)));
    }

    #[test]
    fn dense_design_is_rejected() {
        let config = DgpConfig::preset("table1-panelA").unwrap();
        assert!(run_tpr_study(&config, 1, &TprSettings::default(), &FitOptions::default()).is_err());
    }
}
