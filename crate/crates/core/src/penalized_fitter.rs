//! LASSO-penalized EM: the `β` M-step maximizes `Q(β) − λ Σ|β_js|` over the
//! non-intercept coefficients by an active-set search, everything else is
//! the plain EM.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::em_fitter::{
    least_squares_start, run_em, Dataset, EStepWeights, FitOptions, FitResult, InitStrategy,
};
use crate::error::{Error, Result};
use crate::mal_dist::{check_loss, MalKernel, ModelParams, QuantileSpec};

const MAX_ROUNDS: usize = 500;
const KKT_TOL: f64 = 1e-10;
const GRAD_ROUNDING: f64 = 1e-12;

/// `sign(v)·max(|v| − γ, 0)`.
#[inline]
pub fn soft_threshold(v: f64, gamma: f64) -> f64 {
    if v > gamma {
        v - gamma
    } else if v < -gamma {
        v + gamma
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedBeta {
    pub beta: DMatrix<f64>,
    pub rounds: usize,
    pub converged: bool,
}

/// Pieces of the `β`-part of the expected complete-data log-likelihood:
/// `Q(β) = Σ_i [−½ z_i r_iᵀP r_i + r_iᵀP m]`, `P = (DΣ̃D)⁻¹`, `m = Dξ̃`.
struct Quadratic {
    prec: DMatrix<f64>,
    prec_skew: DVector<f64>,
    /// `XᵀZX`.
    gram: DMatrix<f64>,
    colsum: DVector<f64>,
}

impl Quadratic {
    fn new(
        data: &Dataset,
        z: &DVector<f64>,
        delta: &DVector<f64>,
        psi: &DMatrix<f64>,
        spec: &QuantileSpec,
    ) -> Result<Self> {
        let params_scale = ModelParams {
            beta: DMatrix::zeros(data.p(), 1),
            delta: delta.clone(),
            psi: psi.clone(),
        }
        .scale_matrix(spec);
        let prec = params_scale
            .cholesky()
            .ok_or_else(|| Error::Singular("scale matrix is not positive definite".into()))?
            .inverse();
        let skew = DVector::from_fn(data.p(), |j, _| delta[j] * spec.skew()[j]);
        let x = data.design();
        let zx = DMatrix::from_fn(data.n(), data.k(), |i, s| z[i] * x[(i, s)]);
        Ok(Self {
            prec_skew: &prec * skew,
            prec,
            gram: x.transpose() * zx,
            colsum: DVector::from_fn(data.k(), |s, _| x.column(s).sum()),
        })
    }

    /// `G = Σ z_i r_i x_iᵀ` (p×k).
    fn weighted_cross(data: &Dataset, z: &DVector<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
        let resid = data.residuals(beta);
        let x = data.design();
        let zr = DMatrix::from_fn(data.n(), data.p(), |i, j| z[i] * resid[(i, j)]);
        zr.transpose() * x
    }

    /// `∂Q/∂β_js = (P G)_js − (P m)_j Σ_i x_is`.
    fn gradient(&self, cross: &DMatrix<f64>, j: usize, s: usize) -> f64 {
        let mut g = -self.prec_skew[j] * self.colsum[s];
        for l in 0..cross.nrows() {
            g += self.prec[(j, l)] * cross[(l, s)];
        }
        g
    }
}

/// Maximizes `Q(β) − λ Σ_{penalized} |β_js|` with `(δ, Ψ, z)` fixed, starting
/// from `warm_start`. Columns of `X` that are identically one are not
/// penalized.
///
/// Active-set (feature-sign) search: once the active coefficients are
/// stationary, the zero coefficient with the largest subgradient violation
/// enters by a soft-threshold coordinate step; each other round takes the
/// Newton step of the smooth objective on the current sign pattern and moves
/// to the best of the full step and the points where a coefficient reaches
/// zero. Every round strictly increases the objective, so the search ends
/// after finitely many rounds even when `XᵀZX` is badly conditioned.
pub fn pm_step_beta(
    data: &Dataset,
    weights: &EStepWeights,
    delta: &DVector<f64>,
    psi: &DMatrix<f64>,
    spec: &QuantileSpec,
    lambda: f64,
    warm_start: &DMatrix<f64>,
) -> Result<PenalizedBeta> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be nonnegative, got {lambda}")));
    }
    let (p, k) = (data.p(), data.k());
    let penalized: Vec<bool> = data.intercept_columns().iter().map(|c| !c).collect();
    let quad = Quadratic::new(data, &weights.z, delta, psi, spec)?;
    let mut beta = warm_start.clone();
    if lambda.is_infinite() {
        for s in (0..k).filter(|&s| penalized[s]) {
            beta.column_mut(s).fill(0.0);
        }
    }
    let x_abs = data.design().abs();
    let prec_abs = quad.prec.abs();
    // Gradient and, per coefficient, the stationarity tolerance: a relative
    // floor plus the rounding error of the sums that form the gradient.
    let grad = |beta: &DMatrix<f64>, base: f64| {
        let resid = data.residuals(beta);
        let zr = DMatrix::from_fn(data.n(), p, |i, j| weights.z[i] * resid[(i, j)]);
        let cross = zr.transpose() * data.design();
        let spread = &prec_abs * zr.abs().transpose() * &x_abs;
        let g = DMatrix::from_fn(p, k, |j, s| quad.gradient(&cross, j, s));
        let tol = DMatrix::from_fn(p, k, |j, s| {
            let skew_part = quad.prec_skew[j].abs() * x_abs.column(s).sum();
            base + GRAD_ROUNDING * (spread[(j, s)] + skew_part)
        });
        (g, tol)
    };
    let (mut g, _) = grad(&beta, 0.0);
    let base = KKT_TOL * g.amax().max(if lambda.is_finite() { lambda } else { 0.0 }).max(1.0);
    let mut tol = grad(&beta, base).1;
    let mut rounds = 0;
    let mut converged = false;
    let mut entering: Option<(usize, usize)> = None;
    // Set when the active coefficients cannot move further in floating point.
    let mut stuck = false;
    while rounds < MAX_ROUNDS {
        if entering.is_none() {
            let active_ok = stuck || (0..p).all(|j| {
                (0..k).all(|s| {
                    let b = beta[(j, s)];
                    if !penalized[s] {
                        g[(j, s)].abs() <= tol[(j, s)]
                    } else if b != 0.0 {
                        (g[(j, s)] - lambda * b.signum()).abs() <= tol[(j, s)]
                    } else {
                        true
                    }
                })
            });
            if active_ok {
                let mut worst = None;
                let mut excess = 0.0;
                if lambda.is_finite() {
                    for j in 0..p {
                        for s in (0..k).filter(|&s| penalized[s] && beta[(j, s)] == 0.0) {
                            let e = g[(j, s)].abs() - lambda - tol[(j, s)];
                            if e > excess {
                                excess = e;
                                worst = Some((j, s));
                            }
                        }
                    }
                }
                match worst {
                    None => {
                        converged = true;
                        break;
                    }
                    Some((j, s)) => {
                        // Enter at the one-coordinate maximizer when it is
                        // representable, else let the Newton step size it.
                        let h = quad.prec[(j, j)] * quad.gram[(s, s)];
                        let v = soft_threshold(g[(j, s)] / h, lambda / h);
                        if v == 0.0 {
                            entering = Some((j, s));
                        } else {
                            beta[(j, s)] = v;
                            rounds += 1;
                            stuck = false;
                            (g, tol) = grad(&beta, base);
                            continue;
                        }
                    }
                }
            }
        }
        rounds += 1;
        let adding = entering.take();
        if !feature_sign_step(&quad, &g, &mut beta, &penalized, lambda, adding)? {
            if adding.is_some() || stuck {
                converged = true;
                break;
            }
            stuck = true;
            continue;
        }
        stuck = false;
        (g, tol) = grad(&beta, base);
    }
    Ok(PenalizedBeta {
        beta,
        rounds,
        converged,
    })
}

/// One round of the active-set search. `entering` is a zero coefficient
/// joining the active set with the sign of its gradient. Returns `false`
/// when no candidate point improves the objective or the step is lost to
/// rounding.
fn feature_sign_step(
    quad: &Quadratic,
    g: &DMatrix<f64>,
    beta: &mut DMatrix<f64>,
    penalized: &[bool],
    lambda: f64,
    entering: Option<(usize, usize)>,
) -> Result<bool> {
    let (p, k) = beta.shape();
    let active: Vec<(usize, usize)> = (0..p)
        .flat_map(|j| (0..k).map(move |s| (j, s)))
        .filter(|&(j, s)| !penalized[s] || beta[(j, s)] != 0.0 || Some((j, s)) == entering)
        .collect();
    if active.is_empty() {
        return Ok(false);
    }
    let sign = |j: usize, s: usize| {
        if beta[(j, s)] != 0.0 {
            beta[(j, s)].signum()
        } else {
            g[(j, s)].signum()
        }
    };
    let m = active.len();
    let hess = DMatrix::from_fn(m, m, |a, b| {
        let ((j, s), (l, t)) = (active[a], active[b]);
        quad.prec[(j, l)] * quad.gram[(s, t)]
    });
    let rhs = DVector::from_fn(m, |a, _| {
        let (j, s) = active[a];
        if penalized[s] {
            g[(j, s)] - lambda * sign(j, s)
        } else {
            g[(j, s)]
        }
    });
    let Some(ch) = hess.clone().cholesky() else {
        return Err(Error::Singular("penalized Hessian is not positive definite".into()));
    };
    let step = ch.solve(&rhs);
    let curvature = (step.transpose() * &hess * &step)[0];
    let slope: f64 = active.iter().enumerate().map(|(a, &(j, s))| g[(j, s)] * step[a]).sum();
    // Change in the objective at step length t, with a bound on its rounding error.
    let gain = |t: f64| {
        let mut pen = 0.0;
        let mut pen_size = 0.0;
        for (a, &(j, s)) in active.iter().enumerate() {
            if penalized[s] {
                let b = beta[(j, s)];
                let moved = (b + t * step[a]).abs();
                pen += moved - b.abs();
                pen_size += moved + b.abs();
            }
        }
        let lin = t * slope;
        let quad_term = 0.5 * t * t * curvature;
        let penalty = if pen == 0.0 { 0.0 } else { lambda * pen };
        let noise = 1e-12 * (lin.abs() + quad_term.abs() + if pen_size == 0.0 { 0.0 } else { lambda * pen_size });
        (lin - quad_term - penalty, noise)
    };
    let (v1, n1) = gain(1.0);
    let mut best = (1.0, v1, n1, None);
    for (a, &(j, s)) in active.iter().enumerate() {
        let b = beta[(j, s)];
        if penalized[s] && b != 0.0 && step[a] != 0.0 {
            let t = -b / step[a];
            if t > 0.0 && t < 1.0 {
                let (v, noise) = gain(t);
                if v > best.1 {
                    best = (t, v, noise, Some(a));
                }
            }
        }
    }
    let (t, value, noise, zeroed) = best;
    if !(value > noise) {
        return Ok(false);
    }
    let mut changed = false;
    for (a, &(j, s)) in active.iter().enumerate() {
        let next = if Some(a) == zeroed { 0.0 } else { beta[(j, s)] + t * step[a] };
        changed |= next != beta[(j, s)];
        beta[(j, s)] = next;
    }
    Ok(changed)
}

fn l1_penalty(beta: &DMatrix<f64>, penalized: &[bool], lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for s in 0..beta.ncols() {
        if penalized[s] {
            total += beta.column(s).iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    lambda * total
}

/// Penalized EM at a fixed `λ`. `λ = ∞` fits the model with every
/// penalized coefficient held at zero.
pub fn fit_pem(data: &Dataset, spec: &QuantileSpec, lambda: f64, opts: &FitOptions) -> Result<FitResult> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be nonnegative, got {lambda}")));
    }
    let penalized: Vec<bool> = data.intercept_columns().iter().map(|c| !c).collect();
    let penalty_lambda = if lambda.is_finite() { lambda } else { 0.0 };
    run_em(
        data,
        spec,
        opts,
        |w, params| {
            Ok(pm_step_beta(data, w, &params.delta, &params.psi, spec, lambda, &params.beta)?.beta)
        },
        |beta| l1_penalty(beta, &penalized, penalty_lambda),
    )
}

/// The fit with every penalized coefficient at zero, started from least
/// squares on the unpenalized columns.
pub fn fit_null_model(data: &Dataset, spec: &QuantileSpec, opts: &FitOptions) -> Result<FitResult> {
    let start = least_squares_start(data, spec, &data.intercept_columns())?;
    let opts = FitOptions {
        init: InitStrategy::Given(start),
        ..opts.clone()
    };
    fit_pem(data, spec, f64::INFINITY, &opts)
}

/// Smallest `λ` at which the null model is a fixed point of the penalized
/// M-step: the largest `|∂Q/∂β_js|` over penalized coefficients after the
/// unpenalized ones are re-maximized under the final weights.
pub fn lambda_max_from(data: &Dataset, spec: &QuantileSpec, null_fit: &FitResult) -> Result<f64> {
    let params = &null_fit.params;
    let w = &null_fit.final_weights;
    let beta = pm_step_beta(data, w, &params.delta, &params.psi, spec, f64::INFINITY, &params.beta)?.beta;
    let quad = Quadratic::new(data, &w.z, &params.delta, &params.psi, spec)?;
    let cross = Quadratic::weighted_cross(data, &w.z, &beta);
    let mut lmax: f64 = 0.0;
    for (s, intercept) in data.intercept_columns().into_iter().enumerate() {
        if !intercept {
            for j in 0..data.p() {
                lmax = lmax.max(quad.gradient(&cross, j, s).abs());
            }
        }
    }
    if !(lmax > 0.0 && lmax.is_finite()) {
        return Err(Error::Domain("no penalized coefficient has a nonzero gradient".into()));
    }
    Ok(lmax)
}

/// Decreasing log-spaced penalties from `λ_max` to `ratio·λ_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    pub values: Vec<f64>,
    pub ratio: f64,
    pub size: usize,
}

impl LambdaGrid {
    pub fn new(lambda_max: f64, size: usize, ratio: f64) -> Result<Self> {
        if size < 2 {
            return Err(Error::Domain("grid needs at least two values".into()));
        }
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Domain(format!("grid ratio must be in (0,1), got {ratio}")));
        }
        if !(lambda_max > 0.0 && lambda_max.is_finite()) {
            return Err(Error::Domain(format!("lambda_max must be positive, got {lambda_max}")));
        }
        let step = ratio.ln() / (size - 1) as f64;
        let mut values: Vec<f64> = (0..size).map(|i| lambda_max * (step * i as f64).exp()).collect();
        values[size - 1] = lambda_max * ratio;
        Ok(Self { values, ratio, size })
    }

    pub fn lambda_max(&self) -> f64 {
        self.values[0]
    }
}

pub fn lambda_grid(
    data: &Dataset,
    spec: &QuantileSpec,
    size: usize,
    ratio: f64,
    opts: &FitOptions,
) -> Result<LambdaGrid> {
    let null_fit = fit_null_model(data, spec, opts)?;
    LambdaGrid::new(lambda_max_from(data, spec, &null_fit)?, size, ratio)
}

/// Warm-started fits along `lambdas` (in the given order), starting from the
/// null model.
pub fn fit_path(
    data: &Dataset,
    spec: &QuantileSpec,
    lambdas: &[f64],
    opts: &FitOptions,
) -> Result<Vec<FitResult>> {
    let null_fit = fit_null_model(data, spec, opts)?;
    let mut start = null_fit.params;
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let o = FitOptions {
            init: InitStrategy::Given(start),
            ..opts.clone()
        };
        let fit = fit_pem(data, spec, lambda, &o)?;
        start = fit.params.clone();
        out.push(fit);
    }
    Ok(out)
}

/// Held-out score used to pick `λ`; lower is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvScore {
    /// `Σ_j mean_i ρ_τj((y_ij − x_iᵀβ_j)/δ_j)`.
    #[default]
    CheckLoss,
    /// Mean negative log-likelihood of the held-out rows.
    NegLogLik,
}

pub fn holdout_score(test: &Dataset, spec: &QuantileSpec, params: &ModelParams, score: CvScore) -> Result<f64> {
    let resid = test.residuals(&params.beta);
    let n = test.n() as f64;
    match score {
        CvScore::CheckLoss => {
            let mut total = 0.0;
            for j in 0..test.p() {
                let tau = spec.levels()[j];
                let d = params.delta[j];
                total += resid.column(j).iter().map(|r| check_loss(r / d, tau)).sum::<f64>() / n;
            }
            Ok(total)
        }
        CvScore::NegLogLik => {
            let kernel = MalKernel::new(spec, &params.delta, &params.psi)?;
            let mut r = vec![0.0; test.p()];
            let mut total = 0.0;
            for i in 0..test.n() {
                for j in 0..test.p() {
                    r[j] = resid[(i, j)];
                }
                total -= kernel.log_density_residual(&r);
            }
            Ok(total / n)
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub grid: LambdaGrid,
    /// m×K, rows follow the grid.
    pub fold_scores: DMatrix<f64>,
    pub mean_scores: Vec<f64>,
    pub chosen_index: usize,
    pub chosen_lambda: f64,
    pub final_fit: FitResult,
}

/// Row indices of each fold: a random permutation dealt round-robin.
pub fn assign_folds<R: Rng + ?Sized>(n: usize, folds: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut out = vec![Vec::with_capacity(n / folds + 1); folds];
    for (pos, i) in perm.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in out.iter_mut() {
        f.sort_unstable();
    }
    out
}

/// Index of the smallest score; ties go to the earliest (largest `λ`).
pub fn argmin_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

pub fn cross_validate<R: Rng + ?Sized>(
    data: &Dataset,
    spec: &QuantileSpec,
    folds: usize,
    grid: &LambdaGrid,
    opts: &FitOptions,
    rng: &mut R,
) -> Result<CvResult> {
    cross_validate_with(data, spec, folds, grid, opts, rng, CvScore::CheckLoss)
}

pub fn cross_validate_with<R: Rng + ?Sized>(
    data: &Dataset,
    spec: &QuantileSpec,
    folds: usize,
    grid: &LambdaGrid,
    opts: &FitOptions,
    rng: &mut R,
    score: CvScore,
) -> Result<CvResult> {
    if folds < 2 || folds > data.n() {
        return Err(Error::Domain(format!(
            "need 2 <= folds <= n, got folds={folds}, n={}",
            data.n()
        )));
    }
    let assignment = assign_folds(data.n(), folds, rng);
    let per_fold: Vec<Result<Vec<f64>>> = assignment
        .par_iter()
        .enumerate()
        .map(|(f, test_rows)| {
            let wrap = |e: Error| Error::Fold {
                fold: f,
                source: Box::new(e),
            };
            let mut in_test = vec![false; data.n()];
            for &i in test_rows {
                in_test[i] = true;
            }
            let train_rows: Vec<usize> = (0..data.n()).filter(|&i| !in_test[i]).collect();
            let train = data.select_rows(&train_rows).map_err(wrap)?;
            let test = Dataset::new_unchecked(
                data.responses().select_rows(test_rows),
                data.design().select_rows(test_rows),
            );
            let path = fit_path(&train, spec, &grid.values, opts).map_err(wrap)?;
            path.iter()
                .map(|fit| holdout_score(&test, spec, &fit.params, score).map_err(wrap))
                .collect()
        })
        .collect();
    let m = grid.values.len();
    let mut fold_scores = DMatrix::zeros(m, folds);
    for (f, res) in per_fold.into_iter().enumerate() {
        for (l, v) in res?.into_iter().enumerate() {
            fold_scores[(l, f)] = v;
        }
    }
    let mean_scores: Vec<f64> = (0..m).map(|l| fold_scores.row(l).mean()).collect();
    let chosen_index = argmin_first(&mean_scores);
    let mut path = fit_path(data, spec, &grid.values[..=chosen_index], opts)?;
    let final_fit = path.pop().expect("path has at least one fit");
    Ok(CvResult {
        grid: grid.clone(),
        fold_scores,
        mean_scores,
        chosen_index,
        chosen_lambda: grid.values[chosen_index],
        final_fit,
    })
}
