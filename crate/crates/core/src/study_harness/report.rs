//! Serializable reports and their plain-text table renderings.

use std::fmt::Write;

use nalgebra::DMatrix;
use serde::Serialize;

use super::bootstrap::BootstrapResult;
use super::monte_carlo::{McSummary, MethodStats};
use super::tpr::TprSummary;
use crate::em_fitter::FitResult;
use crate::penalized_fitter::{CvResult, CvScore};

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub response_names: Vec<String>,
    pub design_names: Vec<String>,
    pub tau: Vec<f64>,
    /// p×k, rows are responses.
    #[serde(with = "super::dgp::matrix_rows")]
    pub beta: DMatrix<f64>,
    pub delta: Vec<f64>,
    #[serde(with = "super::dgp::matrix_rows")]
    pub psi: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub psi_repaired: bool,
    pub delta_unconverged: bool,
    pub stalled: bool,
}

impl FitReport {
    pub fn new(fit: &FitResult, tau: &[f64], response_names: Vec<String>, design_names: Vec<String>) -> Self {
        Self {
            response_names,
            design_names,
            tau: tau.to_vec(),
            beta: fit.params.beta.clone(),
            delta: fit.params.delta.iter().copied().collect(),
            psi: fit.params.psi.clone(),
            loglik: fit.loglik(),
            iterations: fit.iterations,
            converged: fit.converged,
            psi_repaired: fit.psi_repaired,
            delta_unconverged: fit.delta_unconverged,
            stalled: fit.stalled,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LassoReport {
    pub fit: FitReport,
    pub folds: usize,
    pub score: CvScore,
    pub lambdas: Vec<f64>,
    pub mean_scores: Vec<f64>,
    pub chosen_index: usize,
    pub chosen_lambda: f64,
}

impl LassoReport {
    pub fn new(fit: FitReport, cv: &CvResult, score: CvScore) -> Self {
        Self {
            fit,
            folds: cv.fold_scores.ncols(),
            score,
            lambdas: cv.grid.values.clone(),
            mean_scores: cv.mean_scores.clone(),
            chosen_index: cv.chosen_index,
            chosen_lambda: cv.chosen_lambda,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapReport {
    pub fit: FitReport,
    pub bootstrap: BootstrapResult,
}

fn coefficient_table(fit: &FitReport, se: Option<&DMatrix<f64>>) -> String {
    let width = fit.design_names.iter().map(String::len).max().unwrap_or(0).max(9);
    let mut out = String::new();
    for (j, name) in fit.response_names.iter().enumerate() {
        let _ = writeln!(out, "{name} (tau = {})  delta = {:.6}", fit.tau[j], fit.delta[j]);
        match se {
            Some(_) => {
                let _ = writeln!(out, "  {:<width$} {:>12} {:>12}", "covariate", "estimate", "std.error");
            }
            None => {
                let _ = writeln!(out, "  {:<width$} {:>12}", "covariate", "estimate");
            }
        }
        for (s, cov) in fit.design_names.iter().enumerate() {
            let _ = write!(out, "  {cov:<width$} {:>12.6}", fit.beta[(j, s)]);
            if let Some(se) = se {
                let _ = write!(out, " {:>12.6}", se[(j, s)]);
            }
            out.push('\n');
        }
    }
    out
}

fn psi_table(psi: &DMatrix<f64>) -> String {
    let mut out = String::from("psi\n");
    for i in 0..psi.nrows() {
        out.push(' ');
        for j in 0..psi.ncols() {
            let _ = write!(out, " {:>9.4}", psi[(i, j)]);
        }
        out.push('\n');
    }
    out
}

pub fn fit_text(fit: &FitReport) -> String {
    let mut out = coefficient_table(fit, None);
    out += &psi_table(&fit.psi);
    let _ = writeln!(
        out,
        "loglik {:.6}  iterations {}  converged {}",
        fit.loglik, fit.iterations, fit.converged
    );
    out
}

pub fn lasso_text(r: &LassoReport) -> String {
    let mut out = format!(
        "lambda = {:.6e} (grid index {} of {}, {}-fold {:?})\n",
        r.chosen_lambda,
        r.chosen_index,
        r.lambdas.len(),
        r.folds,
        r.score
    );
    out += &fit_text(&r.fit);
    out
}

pub fn bootstrap_text(r: &BootstrapReport) -> String {
    let mut out = coefficient_table(&r.fit, Some(&r.bootstrap.se));
    let _ = writeln!(
        out,
        "bootstrap: {} of {} resamples used, seed {}",
        r.bootstrap.used, r.bootstrap.b, r.bootstrap.seed
    );
    out
}

fn stats_cells(m: &MethodStats) -> String {
    format!("{:>10.4} {:>10.3} {:>9.4}", m.mean, m.relative_bias_pct, m.rmse)
}

/// One row per coefficient with the estimate, relative bias (%) and RMSE of
/// both methods.
pub fn monte_carlo_text(mc: &McSummary) -> String {
    let mut out = format!(
        "tau = {:?}, {:?} errors, n = {}, B = {} (joint used {}, univariate used {})\n",
        mc.config.tau_levels,
        mc.config.error_family,
        mc.config.n,
        mc.replications,
        mc.joint_used,
        mc.univariate_used
    );
    let _ = writeln!(
        out,
        "{:<9} {:>8} | {:>10} {:>10} {:>9} | {:>10} {:>10} {:>9}",
        "coef", "true", "joint", "bias%", "rmse", "univ", "bias%", "rmse"
    );
    for c in &mc.coefficients {
        let _ = writeln!(
            out,
            "{:<9} {:>8.3} | {} | {}",
            format!("b{}{}", c.response + 1, c.covariate),
            c.truth,
            stats_cells(&c.joint),
            stats_cells(&c.univariate)
        );
    }
    for f in &mc.failures {
        let _ = writeln!(out, "excluded replication {} ({:?}): {}", f.replication, f.method, f.reason);
    }
    out
}

pub fn tpr_text(t: &TprSummary) -> String {
    let mut out = format!(
        "tau = {:?}, {:?} errors, n = {}, B = {} (used {})\n",
        t.config.tau_levels, t.config.error_family, t.config.n, t.replications, t.used
    );
    for c in &t.cells {
        let _ = write!(out, " {:>8}", format!("b{}{}", c.response + 1, c.covariate));
    }
    let _ = writeln!(out, " {:>8}", "average");
    for c in &t.cells {
        let _ = write!(out, " {:>8.3}", c.tpr_pct);
    }
    let _ = writeln!(out, " {:>8.3}", t.average_tpr_pct);
    let _ = writeln!(out, "all true nonzeros kept in {:.1}% of replications", t.nonzero_kept_pct);
    for f in &t.failures {
        let _ = writeln!(out, "excluded replication {}: {}", f.replication, f.reason);
    }
    out
}
