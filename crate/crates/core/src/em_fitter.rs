//! EM estimation of `(β, δ, Ψ)` under the constrained MAL likelihood.
//!
//! Each iteration runs the E-step (GIG moments of the latent mixing weight),
//! then three conditional maximizations of the expected complete-data
//! log-likelihood: `β` in closed form, `Ψ` over correlation matrices, and `δ`
//! by coordinate ascent in `1/δ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    dependent_columns, normalize_to_correlation, repair_correlation, spd_solve, symmetrize,
    MIN_CORRELATION_EIGENVALUE, REPAIR_EIGENVALUE_FLOOR,
};
use crate::mal_dist::{MalKernel, ModelParams, QuantileSpec};
use crate::special_fn::gig_moments;

/// Responses `Y` (n×p) and design `X` (n×k).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    responses: DMatrix<f64>,
    design: DMatrix<f64>,
}

impl Dataset {
    /// Validates `n > k`, finiteness, full column rank of `X` and non-constant
    /// responses.
    pub fn new(responses: DMatrix<f64>, design: DMatrix<f64>) -> Result<Self> {
        let (n, p) = responses.shape();
        let (nx, k) = design.shape();
        if n != nx {
            return Err(Error::Dimension(format!(
                "responses have {n} rows but design has {nx}"
            )));
        }
        if p == 0 || k == 0 {
            return Err(Error::Dimension("need at least one response and one column".into()));
        }
        if n <= k {
            return Err(Error::Dimension(format!("need n > k, got n={n}, k={k}")));
        }
        if responses.iter().chain(design.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("data contain non-finite values".into()));
        }
        for j in 0..p {
            let col = responses.column(j);
            let first = col[0];
            if col.iter().all(|v| *v == first) {
                return Err(Error::ZeroVariance { column: j });
            }
        }
        let bad = dependent_columns(&(design.transpose() * &design));
        if !bad.is_empty() {
            return Err(Error::RankDeficient { columns: bad });
        }
        Ok(Self { responses, design })
    }

    /// Skips validation; for held-out rows that only get scored.
    pub(crate) fn new_unchecked(responses: DMatrix<f64>, design: DMatrix<f64>) -> Self {
        Self { responses, design }
    }

    /// Prepends a column of ones to `covariates`.
    pub fn with_intercept(responses: DMatrix<f64>, covariates: &DMatrix<f64>) -> Result<Self> {
        let n = covariates.nrows();
        let design = DMatrix::from_fn(n, covariates.ncols() + 1, |i, s| {
            if s == 0 {
                1.0
            } else {
                covariates[(i, s - 1)]
            }
        });
        Self::new(responses, design)
    }

    pub fn n(&self) -> usize {
        self.responses.nrows()
    }

    pub fn p(&self) -> usize {
        self.responses.ncols()
    }

    pub fn k(&self) -> usize {
        self.design.ncols()
    }

    pub fn responses(&self) -> &DMatrix<f64> {
        &self.responses
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Columns of `X` that are identically one.
    pub fn intercept_columns(&self) -> Vec<bool> {
        (0..self.k())
            .map(|s| self.design.column(s).iter().all(|v| *v == 1.0))
            .collect()
    }

    /// The dataset restricted to (possibly repeated) rows.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.n()) {
            return Err(Error::Dimension(format!("row {bad} out of range")));
        }
        Self::new(self.responses.select_rows(rows), self.design.select_rows(rows))
    }

    /// A single response column with the same design.
    pub fn marginal(&self, j: usize) -> Result<Self> {
        if j >= self.p() {
            return Err(Error::Dimension(format!("response {j} out of range")));
        }
        Ok(Self {
            responses: self.responses.columns(j, 1).into_owned(),
            design: self.design.clone(),
        })
    }

    /// `R = Y − Xβᵀ`.
    pub fn residuals(&self, beta: &DMatrix<f64>) -> DMatrix<f64> {
        &self.responses - &self.design * beta.transpose()
    }
}

/// `u_i = E[W_i | y_i]` and `z_i = E[1/W_i | y_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepWeights {
    pub u: DVector<f64>,
    pub z: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// Equation-by-equation least squares for `β`, `δ_j` from the mean
    /// absolute residual, `Ψ = I`.
    LeastSquares,
    Given(ModelParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop when the log-likelihood changes by less than this...
    pub tol: f64,
    /// ...and no parameter moves by more than this.
    pub param_tol: f64,
    pub delta_solver_tol: f64,
    pub delta_solver_max_iter: usize,
    pub init: InitStrategy,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            param_tol: 1e-5,
            delta_solver_tol: 1e-10,
            delta_solver_max_iter: 100,
            init: InitStrategy::LeastSquares,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.param_tol > 0.0) || !(self.delta_solver_tol > 0.0) {
            return Err(Error::Domain("tolerances must be positive".into()));
        }
        if self.max_iter == 0 || self.delta_solver_max_iter == 0 {
            return Err(Error::Domain("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Observed log-likelihood, starting at the initial value.
    pub loglik_trace: Vec<f64>,
    /// Log-likelihood minus the penalty; equal to `loglik_trace` for plain EM.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_weights: EStepWeights,
    /// Some `Ψ` candidate needed eigenvalue repair.
    pub psi_repaired: bool,
    /// The `Σ̃` update had a zero diagonal and `Ψ` was left unchanged.
    pub psi_degenerate: bool,
    /// The `δ` coordinate solver hit its iteration cap at least once.
    pub delta_unconverged: bool,
    /// Iterations where the full update lowered the objective and a shorter
    /// step was taken instead.
    pub guarded_steps: usize,
    /// No step along the update direction raised the objective; the fit
    /// stopped at the previous iterate.
    pub stalled: bool,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

pub fn e_step(data: &Dataset, params: &ModelParams, spec: &QuantileSpec) -> Result<EStepWeights> {
    check_dims(data, params, spec)?;
    let kernel = MalKernel::new(spec, &params.delta, &params.psi)?;
    let resid = data.residuals(&params.beta);
    Ok(weights_from_residuals(&kernel, &resid))
}

fn weights_from_residuals(kernel: &MalKernel, resid: &DMatrix<f64>) -> EStepWeights {
    let (n, p) = resid.shape();
    let mut u = DVector::zeros(n);
    let mut z = DVector::zeros(n);
    let mut r = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            r[j] = resid[(i, j)];
        }
        let (mean, inv) = gig_moments(&kernel.posterior(&r));
        u[i] = mean;
        z[i] = inv;
    }
    EStepWeights { u, z }
}

fn check_dims(data: &Dataset, params: &ModelParams, spec: &QuantileSpec) -> Result<()> {
    if data.p() != spec.dim() || params.beta.nrows() != data.p() || params.beta.ncols() != data.k() {
        return Err(Error::Dimension(format!(
            "data has p={}, k={}; spec p={}; beta {}x{}",
            data.p(),
            data.k(),
            spec.dim(),
            params.beta.nrows(),
            params.beta.ncols()
        )));
    }
    Ok(())
}

/// `β̂ᵀ = (Σ z_i x_i x_iᵀ)⁻¹ (Σ z_i x_i y_iᵀ − Σ x_i ξ̃ᵀD)`.
pub fn m_step_beta(
    data: &Dataset,
    z: &DVector<f64>,
    delta: &DVector<f64>,
    spec: &QuantileSpec,
) -> Result<DMatrix<f64>> {
    let x = data.design();
    let zx = DMatrix::from_fn(data.n(), data.k(), |i, s| z[i] * x[(i, s)]);
    let gram = x.transpose() * &zx;
    let mut rhs = zx.transpose() * data.responses();
    for s in 0..data.k() {
        let colsum = x.column(s).sum();
        for j in 0..data.p() {
            rhs[(s, j)] -= colsum * delta[j] * spec.skew()[j];
        }
    }
    Ok(spd_solve(&gram, &rhs)?.transpose())
}

/// The same maximizer as [`m_step_beta`], solved for the increment from
/// `beta` so that rounding scales with the size of the step.
pub(crate) fn m_step_beta_from(
    data: &Dataset,
    z: &DVector<f64>,
    delta: &DVector<f64>,
    spec: &QuantileSpec,
    beta: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let x = data.design();
    let resid = data.residuals(beta);
    let zx = DMatrix::from_fn(data.n(), data.k(), |i, s| z[i] * x[(i, s)]);
    let gram = x.transpose() * &zx;
    let mut rhs = zx.transpose() * resid;
    for s in 0..data.k() {
        let colsum = x.column(s).sum();
        for j in 0..data.p() {
            rhs[(s, j)] -= colsum * delta[j] * spec.skew()[j];
        }
    }
    Ok(beta + spd_solve(&gram, &rhs)?.transpose())
}

/// Output of the `Σ̃` step.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaUpdate {
    /// The unconstrained update `(1/n) Σ [z ṙṙᵀ − ξ̃ṙᵀ − ṙξ̃ᵀ + u ξ̃ξ̃ᵀ]`, `ṙ = D⁻¹r`.
    pub sigma_raw: DMatrix<f64>,
    /// The correlation matrix carried forward.
    pub psi: DMatrix<f64>,
    pub repaired: bool,
    pub degenerate: bool,
}

/// The `Σ̃` step. The raw update is rescaled to a correlation matrix; that
/// candidate is kept only if it beats `current_psi` on the expected
/// complete-data log-likelihood, and the winner is then refined by ascent on
/// the manifold of correlation matrices.
pub fn m_step_sigma(
    data: &Dataset,
    beta: &DMatrix<f64>,
    weights: &EStepWeights,
    delta: &DVector<f64>,
    spec: &QuantileSpec,
    current_psi: &DMatrix<f64>,
) -> Result<SigmaUpdate> {
    let (n, p) = (data.n(), data.p());
    let resid = data.residuals(beta);
    let xi = spec.skew();
    let mut m = DMatrix::<f64>::zeros(p, p);
    let mut rs = vec![0.0; p];
    let mut usum = 0.0;
    let mut rsum = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            rs[j] = resid[(i, j)] / delta[j];
            rsum[j] += rs[j];
        }
        let zi = weights.z[i];
        usum += weights.u[i];
        for a in 0..p {
            for b in 0..=a {
                m[(a, b)] += zi * rs[a] * rs[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..=a {
            let v = m[(a, b)] - xi[a] * rsum[b] - rsum[a] * xi[b] + usum * xi[a] * xi[b];
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    let sigma_raw = m / n as f64;
    if p == 1 {
        return Ok(SigmaUpdate {
            degenerate: !(sigma_raw[(0, 0)] > 0.0),
            sigma_raw,
            psi: DMatrix::identity(1, 1),
            repaired: false,
        });
    }
    let s = spec.scale_diag();
    let cbar = DMatrix::from_fn(p, p, |a, b| sigma_raw[(a, b)] / (s[a] * s[b]));
    let Some(mut candidate) = normalize_to_correlation(&cbar) else {
        return Ok(SigmaUpdate {
            sigma_raw,
            psi: current_psi.clone(),
            repaired: false,
            degenerate: true,
        });
    };
    let mut repaired = false;
    if crate::linalg::min_eigenvalue(&candidate) <= MIN_CORRELATION_EIGENVALUE {
        candidate = repair_correlation(&candidate, REPAIR_EIGENVALUE_FLOOR);
        repaired = true;
    }
    // objective per observation: −½ ln|Ψ| − ½ tr(Ψ⁻¹ C̄)
    let q_new = psi_objective(&candidate, &cbar);
    let q_old = psi_objective(current_psi, &cbar);
    let start = if q_new >= q_old { candidate } else { current_psi.clone() };
    let psi = refine_psi(start, &cbar);
    Ok(SigmaUpdate {
        sigma_raw,
        psi,
        repaired,
        degenerate: false,
    })
}

fn psi_objective(psi: &DMatrix<f64>, cbar: &DMatrix<f64>) -> f64 {
    let Some(ch) = psi.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let tr = ch.solve(cbar).trace();
    -0.5 * logdet - 0.5 * tr
}

/// Armijo gradient ascent of `psi_objective` with `Ψ = LLᵀ`, rows of `L`
/// constrained to the unit sphere.
fn refine_psi(start: DMatrix<f64>, cbar: &DMatrix<f64>) -> DMatrix<f64> {
    let p = start.nrows();
    let Some(ch) = start.clone().cholesky() else {
        return start;
    };
    let mut l = ch.l();
    let mut f = psi_objective(&start, cbar);
    let mut step = 1.0;
    for _ in 0..200 {
        let psi = &l * l.transpose();
        let Some(inv) = psi.clone().try_inverse() else {
            break;
        };
        let g = (&inv * cbar * &inv - &inv) * 0.5;
        let mut e = (&g * &l) * 2.0;
        for i in 0..p {
            let dot = e.row(i).dot(&l.row(i));
            for c in 0..p {
                e[(i, c)] -= dot * l[(i, c)];
            }
        }
        let g2 = e.norm_squared();
        if g2 < 1e-28 {
            break;
        }
        let mut t = step;
        let mut accepted = false;
        while t > 1e-16 {
            let mut trial = &l + &e * t;
            for i in 0..p {
                let norm = trial.row(i).norm();
                for c in 0..p {
                    trial[(i, c)] /= norm;
                }
            }
            let cand = &trial * trial.transpose();
            let fc = psi_objective(&cand, cbar);
            if fc >= f + 1e-4 * t * g2 {
                let gain = fc - f;
                l = trial;
                f = fc;
                step = (t * 2.0).min(1e3);
                accepted = true;
                if gain <= 1e-15 * f.abs().max(1.0) {
                    t = 0.0;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || t == 0.0 {
            break;
        }
    }
    let mut psi = &l * l.transpose();
    symmetrize(&mut psi);
    for i in 0..p {
        psi[(i, i)] = 1.0;
    }
    if psi_objective(&psi, cbar) >= psi_objective(&start, cbar) {
        psi
    } else {
        start
    }
}

/// Outcome of the `δ` coordinate solver.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSolve {
    pub delta: DVector<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Coefficients of the `δ` first-order conditions written in `v = 1/δ`:
/// `n/v_j − (A v)_j + b_j = 0` with `A = Σ̃⁻¹ ∘ Σ z rrᵀ` and
/// `b = (Σ r) ∘ Σ̃⁻¹ξ̃`.
fn delta_system(
    resid: &DMatrix<f64>,
    z: &DVector<f64>,
    psi: &DMatrix<f64>,
    spec: &QuantileSpec,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (n, p) = resid.shape();
    let sigma_inv = spec
        .sigma_tilde(psi)
        .cholesky()
        .ok_or_else(|| Error::Singular("Σ̃ is not positive definite".into()))?
        .inverse();
    let mut c = DMatrix::<f64>::zeros(p, p);
    let mut s = DVector::<f64>::zeros(p);
    for i in 0..n {
        for a in 0..p {
            s[a] += resid[(i, a)];
            for b in 0..=a {
                c[(a, b)] += z[i] * resid[(i, a)] * resid[(i, b)];
            }
        }
    }
    symmetrize_lower(&mut c);
    let a = sigma_inv.component_mul(&c);
    let w = &sigma_inv * spec.skew_vector();
    Ok((a, s.component_mul(&w)))
}

fn symmetrize_lower(m: &mut DMatrix<f64>) {
    for a in 0..m.nrows() {
        for b in 0..a {
            m[(b, a)] = m[(a, b)];
        }
    }
}

/// Maximizes the expected complete-data log-likelihood over `δ` with `β`
/// and `Ψ` held fixed, by exact coordinate maximization in `v = 1/δ`.
pub fn m_step_delta(
    data: &Dataset,
    beta: &DMatrix<f64>,
    z: &DVector<f64>,
    psi: &DMatrix<f64>,
    spec: &QuantileSpec,
    current_delta: &DVector<f64>,
    opts: &FitOptions,
) -> Result<DeltaSolve> {
    let resid = data.residuals(beta);
    let (a, b) = delta_system(&resid, z, psi, spec)?;
    let n = data.n() as f64;
    let p = data.p();
    let mut v: DVector<f64> = current_delta.map(|d| 1.0 / d);
    for j in 0..p {
        if !(a[(j, j)] > 0.0) {
            return Err(Error::NoPositiveRoot { response: j });
        }
    }
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.delta_solver_max_iter {
        sweeps += 1;
        let mut change: f64 = 0.0;
        for j in 0..p {
            let mut c = b[j];
            for k in 0..p {
                if k != j {
                    c -= a[(j, k)] * v[k];
                }
            }
            let ajj = a[(j, j)];
            let root = (c + (c * c + 4.0 * ajj * n).sqrt()) / (2.0 * ajj);
            if !(root > 0.0 && root.is_finite()) {
                return Err(Error::NoPositiveRoot { response: j });
            }
            change = change.max((root - v[j]).abs() / root);
            v[j] = root;
        }
        if change < opts.delta_solver_tol {
            converged = true;
            break;
        }
    }
    Ok(DeltaSolve {
        delta: v.map(|x| 1.0 / x),
        sweeps,
        converged,
    })
}

/// Relative residuals `δ_j (n/v_j − (Av)_j + b_j) / n` of the `δ` first-order
/// conditions; zero at the exact solution.
pub fn delta_condition_residual(
    data: &Dataset,
    beta: &DMatrix<f64>,
    z: &DVector<f64>,
    psi: &DMatrix<f64>,
    spec: &QuantileSpec,
    delta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let resid = data.residuals(beta);
    let (a, b) = delta_system(&resid, z, psi, spec)?;
    let n = data.n() as f64;
    let v = delta.map(|d| 1.0 / d);
    let av = &a * &v;
    Ok(DVector::from_fn(v.len(), |j, _| {
        delta[j] * (n / v[j] - av[j] + b[j]) / n
    }))
}

/// `Σ_i ln f(y_i)` under the floored density the EM maximizes; agrees with
/// summing [`mal_log_density`](crate::mal_dist::mal_log_density) except for
/// observations whose `m̃` is comparable to the `1e-12` floor.
pub fn observed_log_likelihood(
    data: &Dataset,
    params: &ModelParams,
    spec: &QuantileSpec,
) -> Result<f64> {
    check_dims(data, params, spec)?;
    let kernel = MalKernel::new(spec, &params.delta, &params.psi)?;
    Ok(loglik_from_residuals(&kernel, &data.residuals(&params.beta)))
}

fn loglik_from_residuals(kernel: &MalKernel, resid: &DMatrix<f64>) -> f64 {
    let (n, p) = resid.shape();
    let mut r = vec![0.0; p];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..p {
            r[j] = resid[(i, j)];
        }
        total += kernel.working_log_density(&r);
    }
    total
}

/// Least-squares start restricted to the columns flagged in `columns`
/// (the others start at zero).
pub fn least_squares_start(
    data: &Dataset,
    spec: &QuantileSpec,
    columns: &[bool],
) -> Result<ModelParams> {
    let (p, k) = (data.p(), data.k());
    let keep: Vec<usize> = (0..k).filter(|&s| columns[s]).collect();
    let mut beta = DMatrix::zeros(p, k);
    if !keep.is_empty() {
        let x = data.design().select_columns(&keep);
        let coef = spd_solve(&(x.transpose() * &x), &(x.transpose() * data.responses()))?;
        for (c, &s) in keep.iter().enumerate() {
            for j in 0..p {
                beta[(j, s)] = coef[(c, j)];
            }
        }
    }
    let resid = data.residuals(&beta);
    let delta = DVector::from_fn(p, |j, _| {
        let mad = resid.column(j).iter().map(|v| v.abs()).sum::<f64>() / data.n() as f64;
        (mad / spec.scale_diag()[j]).max(1e-8)
    });
    ModelParams::new(beta, delta, DMatrix::identity(p, p))
}

pub(crate) fn initial_params(
    data: &Dataset,
    spec: &QuantileSpec,
    init: &InitStrategy,
) -> Result<ModelParams> {
    match init {
        InitStrategy::LeastSquares => least_squares_start(data, spec, &vec![true; data.k()]),
        InitStrategy::Given(params) => {
            params.validate()?;
            check_dims(data, params, spec)?;
            Ok(params.clone())
        }
    }
}

fn max_change(a: &ModelParams, b: &ModelParams) -> f64 {
    (&a.beta - &b.beta)
        .amax()
        .max((&a.delta - &b.delta).amax())
        .max((&a.psi - &b.psi).amax())
}

/// The EM loop shared by the plain and penalized fitters; `beta_step` is the
/// conditional maximization for `β` and `penalty` its penalty term.
pub(crate) fn run_em<F, P>(
    data: &Dataset,
    spec: &QuantileSpec,
    opts: &FitOptions,
    mut beta_step: F,
    penalty: P,
) -> Result<FitResult>
where
    F: FnMut(&EStepWeights, &ModelParams) -> Result<DMatrix<f64>>,
    P: Fn(&DMatrix<f64>) -> f64,
{
    opts.validate()?;
    if data.p() != spec.dim() {
        return Err(Error::Dimension(format!(
            "data has {} responses but {} quantile levels",
            data.p(),
            spec.dim()
        )));
    }
    let mut params = initial_params(data, spec, &opts.init)?;
    let mut kernel = MalKernel::new(spec, &params.delta, &params.psi)?;
    let mut resid = data.residuals(&params.beta);
    let mut ll = loglik_from_residuals(&kernel, &resid);
    if !ll.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            last_loglik: ll,
            last_state: Box::new(params),
        });
    }
    let mut obj = ll - penalty(&params.beta);
    let mut loglik_trace = vec![ll];
    let mut objective_trace = vec![obj];
    let mut weights = weights_from_residuals(&kernel, &resid);
    let (mut psi_repaired, mut psi_degenerate, mut delta_unconverged) = (false, false, false);
    let mut guarded_steps = 0;
    let mut stalled = false;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let beta = beta_step(&weights, &params)?;
        let sig = m_step_sigma(data, &beta, &weights, &params.delta, spec, &params.psi)?;
        psi_repaired |= sig.repaired;
        psi_degenerate |= sig.degenerate;
        let ds = m_step_delta(data, &beta, &weights.z, &sig.psi, spec, &params.delta, opts)?;
        delta_unconverged |= !ds.converged;
        let mut next = ModelParams {
            beta,
            delta: ds.delta,
            psi: sig.psi,
        };
        let diverged = |params: ModelParams| Error::Diverged {
            iteration: iterations,
            last_loglik: ll,
            last_state: Box::new(params),
        };
        let Ok(mut next_kernel) = MalKernel::new(spec, &next.delta, &next.psi) else {
            return Err(diverged(params));
        };
        let mut next_resid = data.residuals(&next.beta);
        let mut ll_next = loglik_from_residuals(&next_kernel, &next_resid);
        if !ll_next.is_finite() {
            return Err(diverged(params));
        }
        let mut obj_next = ll_next - penalty(&next.beta);
        if obj_next < obj - ASCENT_NOISE * obj.abs().max(1.0) {
            // The E-step is inexact where the m̃ clamp binds; fall back to
            // the best point on the segment towards the ECM update.
            guarded_steps += 1;
            let mut found = false;
            let mut t = 0.5;
            while t > 1e-6 {
                let trial = interpolate(&params, &next, t);
                if let Ok(k) = MalKernel::new(spec, &trial.delta, &trial.psi) {
                    let r = data.residuals(&trial.beta);
                    let l = loglik_from_residuals(&k, &r);
                    let o = l - penalty(&trial.beta);
                    if o >= obj {
                        (next, next_kernel, next_resid, ll_next, obj_next) = (trial, k, r, l, o);
                        found = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !found {
                stalled = true;
                loglik_trace.push(ll);
                objective_trace.push(obj);
                break;
            }
        }
        let change = max_change(&params, &next);
        let gain = obj_next - obj;
        params = next;
        kernel = next_kernel;
        resid = next_resid;
        ll = ll_next;
        obj = obj_next;
        loglik_trace.push(ll);
        objective_trace.push(obj);
        weights = weights_from_residuals(&kernel, &resid);
        if gain.abs() < opts.tol && change < opts.param_tol {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        params,
        loglik_trace,
        objective_trace,
        iterations,
        converged,
        final_weights: weights,
        psi_repaired,
        psi_degenerate,
        delta_unconverged,
        guarded_steps,
        stalled,
    })
}

/// Relative size of an objective decrease attributed to rounding.
const ASCENT_NOISE: f64 = 1e-13;

fn interpolate(a: &ModelParams, b: &ModelParams, t: f64) -> ModelParams {
    ModelParams {
        beta: &a.beta * (1.0 - t) + &b.beta * t,
        delta: &a.delta * (1.0 - t) + &b.delta * t,
        psi: &a.psi * (1.0 - t) + &b.psi * t,
    }
}

/// Maximum-likelihood fit by EM.
pub fn fit_em(data: &Dataset, spec: &QuantileSpec, opts: &FitOptions) -> Result<FitResult> {
    run_em(
        data,
        spec,
        opts,
        |w, params| m_step_beta_from(data, &w.z, &params.delta, spec, &params.beta),
        |_| 0.0,
    )
}
