//! The constrained multivariate asymmetric Laplace (MAL) distribution.
//!
//! For quantile levels `τ`, the skew and scale of each marginal are pinned to
//! `ξ̃_j = (1-2τ_j)/(τ_j(1-τ_j))` and `σ̃_j² = 2/(τ_j(1-τ_j))`, so that the
//! location `μ_j` is the `τ_j`-quantile of `Y_j`. With `D = diag(δ)` and
//! `Σ̃ = Λ̃ΨΛ̃`, `Y = μ + Dξ̃W + √W·DΣ̃^{1/2}Z`, `W ~ Exp(1)`, `Z ~ N(0, I)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::validate_correlation;
use crate::special_fn::{log_bessel_k, GigParams, MIN_INVERSE_RATE};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Returns `(ξ̃, σ̃²)` for a quantile level `tau`.
pub fn constraint_params(tau: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0,1), got {tau}")));
    }
    let v = tau * (1.0 - tau);
    Ok(((1.0 - 2.0 * tau) / v, 2.0 / v))
}

/// Quantile levels together with the skew and scale constants they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSpec {
    levels: Vec<f64>,
    skew: Vec<f64>,
    scale_diag: Vec<f64>,
}

pub fn build_spec(levels: &[f64]) -> Result<QuantileSpec> {
    QuantileSpec::new(levels)
}

impl QuantileSpec {
    pub fn new(levels: &[f64]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Domain("at least one quantile level is required".into()));
        }
        let mut skew = Vec::with_capacity(levels.len());
        let mut scale_diag = Vec::with_capacity(levels.len());
        for &tau in levels {
            let (xi, s2) = constraint_params(tau)?;
            skew.push(xi);
            scale_diag.push(s2.sqrt());
        }
        Ok(Self {
            levels: levels.to_vec(),
            skew,
            scale_diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// `ξ̃`.
    pub fn skew(&self) -> &[f64] {
        &self.skew
    }

    /// Diagonal of `Λ̃`, i.e. `σ̃_j`.
    pub fn scale_diag(&self) -> &[f64] {
        &self.scale_diag
    }

    /// Bessel order `ν = (2 - p)/2`, also the order of the latent GIG law.
    pub fn bessel_order(&self) -> f64 {
        (2.0 - self.dim() as f64) / 2.0
    }

    pub fn skew_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.skew)
    }

    /// `Σ̃ = Λ̃ΨΛ̃`.
    pub fn sigma_tilde(&self, psi: &DMatrix<f64>) -> DMatrix<f64> {
        let s = &self.scale_diag;
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| s[i] * psi[(i, j)] * s[j])
    }
}

/// Regression coefficients `β` (p×k), marginal scales `δ` and correlation `Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: DMatrix<f64>,
    pub delta: DVector<f64>,
    pub psi: DMatrix<f64>,
}

impl ModelParams {
    pub fn new(beta: DMatrix<f64>, delta: DVector<f64>, psi: DMatrix<f64>) -> Result<Self> {
        let params = Self { beta, delta, psi };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.delta.len();
        if self.beta.nrows() != p || self.psi.nrows() != p || self.psi.ncols() != p {
            return Err(Error::Dimension(format!(
                "beta is {}x{}, delta has {} entries, psi is {}x{}",
                self.beta.nrows(),
                self.beta.ncols(),
                p,
                self.psi.nrows(),
                self.psi.ncols()
            )));
        }
        check_delta(&self.delta)?;
        if self.beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("beta has non-finite entries".into()));
        }
        validate_correlation(&self.psi)
    }

    /// `DΣ̃D`, the scale matrix of the MAL law.
    pub fn scale_matrix(&self, spec: &QuantileSpec) -> DMatrix<f64> {
        let sig = spec.sigma_tilde(&self.psi);
        let d = &self.delta;
        DMatrix::from_fn(d.len(), d.len(), |i, j| d[i] * sig[(i, j)] * d[j])
    }

    /// Recovers `(δ, Ψ)` from a scale matrix `DΣ̃D`: the diagonal is
    /// `δ_j²σ̃_j²` and `Ψ = (DΛ̃)⁻¹ DΣ̃D (DΛ̃)⁻¹`.
    pub fn identify_from_scale(
        scale: &DMatrix<f64>,
        spec: &QuantileSpec,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = spec.dim();
        if scale.nrows() != p || scale.ncols() != p {
            return Err(Error::Dimension("scale matrix does not match spec".into()));
        }
        let mut delta = DVector::zeros(p);
        for j in 0..p {
            let v = scale[(j, j)];
            if !(v > 0.0) {
                return Err(Error::Domain(format!("scale diagonal {j} is not positive")));
            }
            delta[j] = v.sqrt() / spec.scale_diag()[j];
        }
        let g: Vec<f64> = (0..p).map(|j| delta[j] * spec.scale_diag()[j]).collect();
        let mut psi = DMatrix::from_fn(p, p, |i, j| scale[(i, j)] / (g[i] * g[j]));
        for j in 0..p {
            psi[(j, j)] = 1.0;
        }
        Ok((delta, psi))
    }
}

fn check_delta(delta: &DVector<f64>) -> Result<()> {
    if let Some((j, v)) = delta
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
    {
        return Err(Error::Domain(format!("delta[{j}] = {v} must be positive")));
    }
    Ok(())
}

/// `m̃ = rᵀ(DΣ̃D)⁻¹r` and `d̃ = ξ̃ᵀΣ̃⁻¹ξ̃` for one residual vector `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MahalanobisPair {
    pub m: f64,
    pub d: f64,
}

/// Everything needed to evaluate the MAL density or the E-step weights for a
/// fixed `(δ, Ψ)` and spec; build it once per parameter value.
#[derive(Debug, Clone)]
pub struct MalKernel {
    dim: usize,
    order: f64,
    d_tilde: f64,
    /// `(DΣ̃D)⁻¹`, row-major.
    precision: Vec<f64>,
    /// `D⁻¹Σ̃⁻¹ξ̃`.
    linear: Vec<f64>,
    /// `ln 2 − (p/2) ln 2π − ½ ln|DΣ̃D|`.
    log_norm: f64,
}

impl MalKernel {
    pub fn new(spec: &QuantileSpec, delta: &DVector<f64>, psi: &DMatrix<f64>) -> Result<Self> {
        let p = spec.dim();
        if delta.len() != p || psi.nrows() != p || psi.ncols() != p {
            return Err(Error::Dimension(format!(
                "spec has {p} levels, delta {}, psi {}x{}",
                delta.len(),
                psi.nrows(),
                psi.ncols()
            )));
        }
        check_delta(delta)?;
        validate_correlation(psi)?;
        let sigma = spec.sigma_tilde(psi);
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("Σ̃ is not positive definite".into()))?;
        let sigma_inv = chol.inverse();
        let xi = spec.skew_vector();
        let sigma_inv_xi = &sigma_inv * &xi;
        let d_tilde = xi.dot(&sigma_inv_xi).max(0.0);
        let log_det_sigma = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_det_scale = log_det_sigma + 2.0 * delta.iter().map(|v| v.ln()).sum::<f64>();
        let mut precision = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                precision[i * p + j] = sigma_inv[(i, j)] / (delta[i] * delta[j]);
            }
        }
        let linear = (0..p).map(|j| sigma_inv_xi[j] / delta[j]).collect();
        Ok(Self {
            dim: p,
            order: spec.bessel_order(),
            d_tilde,
            precision,
            linear,
            log_norm: std::f64::consts::LN_2 - 0.5 * p as f64 * LN_2PI - 0.5 * log_det_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn d_tilde(&self) -> f64 {
        self.d_tilde
    }

    /// `2 + d̃`, the GIG rate.
    pub fn rate(&self) -> f64 {
        2.0 + self.d_tilde
    }

    pub fn mahalanobis(&self, residual: &[f64]) -> MahalanobisPair {
        let p = self.dim;
        let mut m = 0.0;
        for i in 0..p {
            let mut acc = 0.0;
            for j in 0..p {
                acc += self.precision[i * p + j] * residual[j];
            }
            m += residual[i] * acc;
        }
        MahalanobisPair {
            m: m.max(0.0),
            d: self.d_tilde,
        }
    }

    /// The latent-variable posterior `GIG(ν, 2+d̃, m̃ + 1e-12)`.
    ///
    /// The offset equals tilting the `Exp(1)` mixing law by `e^{-1e-12/(2w)}`,
    /// so the floored density is still a proper scale mixture and EM on it
    /// keeps its ascent property, while staying bounded at `m̃ = 0`.
    pub fn posterior(&self, residual: &[f64]) -> GigParams {
        let m = self.mahalanobis(residual).m + MIN_INVERSE_RATE;
        GigParams {
            order: self.order,
            rate: self.rate(),
            inverse_rate: m,
        }
    }

    /// Log-density at `y` with `residual = y − μ`; `m̃` is floored at
    /// `1e-12` only when it would otherwise vanish.
    pub fn log_density_residual(&self, residual: &[f64]) -> f64 {
        self.log_density_at(residual, self.mahalanobis(residual).m.max(MIN_INVERSE_RATE))
    }

    /// Log-density of the floored law whose latent posterior is
    /// [`posterior`](Self::posterior); this is the likelihood the fitters
    /// maximize. It differs from [`log_density_residual`](Self::log_density_residual)
    /// only where `m̃` is comparable to the floor.
    pub fn working_log_density(&self, residual: &[f64]) -> f64 {
        self.log_density_at(residual, self.mahalanobis(residual).m + MIN_INVERSE_RATE)
    }

    fn log_density_at(&self, residual: &[f64], m: f64) -> f64 {
        let a = self.rate();
        let lin: f64 = residual.iter().zip(&self.linear).map(|(r, w)| r * w).sum();
        let omega = (a * m).sqrt();
        // omega > 0 always, so the Bessel call cannot fail
        let ln_k = log_bessel_k(self.order, omega).expect("positive Bessel argument");
        self.log_norm + lin + 0.5 * self.order * (m / a).ln() + ln_k
    }
}

/// Log-density of `MAL_p(μ, Dξ̃, DΣ̃D)` at `y`.
pub fn mal_log_density(
    y: &[f64],
    mu: &[f64],
    spec: &QuantileSpec,
    delta: &DVector<f64>,
    psi: &DMatrix<f64>,
) -> Result<f64> {
    let p = spec.dim();
    if y.len() != p || mu.len() != p {
        return Err(Error::Dimension(format!(
            "y has {} entries and mu {}, expected {p}",
            y.len(),
            mu.len()
        )));
    }
    let kernel = MalKernel::new(spec, delta, psi)?;
    let r: Vec<f64> = y.iter().zip(mu).map(|(a, b)| a - b).collect();
    Ok(kernel.log_density_residual(&r))
}

/// The check (pinball) loss `ρ_τ(x) = x(τ − 1{x<0})`.
#[inline]
pub fn check_loss(x: f64, tau: f64) -> f64 {
    if x < 0.0 {
        x * (tau - 1.0)
    } else {
        x * tau
    }
}

/// Log-density of the univariate asymmetric Laplace `AL(μ, τ, δ)`.
pub fn al_log_density(y: f64, mu: f64, delta: f64, tau: f64) -> Result<f64> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Domain(format!("delta must be positive, got {delta}")));
    }
    constraint_params(tau)?;
    Ok((tau * (1.0 - tau) / delta).ln() - check_loss((y - mu) / delta, tau))
}

/// Which square root of `Σ̃` the sampler used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixRoot {
    LowerCholesky,
}

#[derive(Debug, Clone)]
pub struct MalSample {
    /// n×p draws, one per row.
    pub draws: DMatrix<f64>,
    pub root: MatrixRoot,
}

/// Draws `n` vectors from the MAL via its location-scale mixture.
pub fn sample_mal<R: Rng + ?Sized>(
    spec: &QuantileSpec,
    mu: &[f64],
    delta: &DVector<f64>,
    psi: &DMatrix<f64>,
    rng: &mut R,
    n: usize,
) -> Result<MalSample> {
    let p = spec.dim();
    if mu.len() != p || delta.len() != p {
        return Err(Error::Dimension(format!(
            "mu has {} entries and delta {}, expected {p}",
            mu.len(),
            delta.len()
        )));
    }
    if n == 0 {
        return Err(Error::Domain("sample size must be at least 1".into()));
    }
    check_delta(delta)?;
    validate_correlation(psi)?;
    let chol = spec
        .sigma_tilde(psi)
        .cholesky()
        .ok_or_else(|| Error::Singular("Σ̃ is not positive definite".into()))?;
    let l = chol.l();
    let xi = spec.skew();
    let mut draws = DMatrix::zeros(n, p);
    let mut z = vec![0.0; p];
    for i in 0..n {
        let w: f64 = Exp1.sample(rng);
        for zj in z.iter_mut() {
            *zj = StandardNormal.sample(rng);
        }
        let sw = w.sqrt();
        for j in 0..p {
            let mut lz = 0.0;
            for s in 0..=j {
                lz += l[(j, s)] * z[s];
            }
            draws[(i, j)] = mu[j] + delta[j] * (xi[j] * w + sw * lz);
        }
    }
    Ok(MalSample {
        draws,
        root: MatrixRoot::LowerCholesky,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corr3() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.3, 0.5, 1.0, 0.4, 0.3, 0.4, 1.0])
    }

    #[test]
    fn constraint_examples() {
        let (xi, s2) = constraint_params(0.5).unwrap();
        assert_eq!(xi, 0.0);
        assert_eq!(s2, 8.0);
        assert!((s2.sqrt() - 2.828).abs() < 5e-4);
        let (xi, s2) = constraint_params(0.25).unwrap();
        assert!((xi - 2.667).abs() < 5e-4);
        assert!((s2 - 10.667).abs() < 5e-4);
        assert!((s2.sqrt() - 3.266).abs() < 5e-4);
        let (xi, s2) = constraint_params(0.9).unwrap();
        assert!((xi + 8.889).abs() < 5e-4);
        assert!((s2 - 22.222).abs() < 5e-4);
        assert!((s2.sqrt() - 4.714).abs() < 5e-4);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(constraint_params(bad).is_err());
        }
    }

    #[test]
    fn spec_examples() {
        let s = build_spec(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(s.skew(), &[0.0, 0.0, 0.0]);
        assert!(s.scale_diag().iter().all(|v| (v - 2.828).abs() < 5e-4));
        let s = build_spec(&[0.25, 0.5, 0.75]).unwrap();
        assert!((s.skew()[0] - 2.667).abs() < 5e-4);
        assert_eq!(s.skew()[1], 0.0);
        assert!((s.skew()[2] + 2.667).abs() < 5e-4);
        let s = build_spec(&[0.5]).unwrap();
        assert_eq!(s.skew(), &[0.0]);
        assert_eq!(s.bessel_order(), 0.5);
        assert!(build_spec(&[0.5, 1.0]).is_err());
        assert!(build_spec(&[]).is_err());
    }

    #[test]
    fn check_loss_examples() {
        assert_eq!(check_loss(0.0, 0.3), 0.0);
        assert_eq!(check_loss(2.0, 0.25), 0.5);
        assert_eq!(check_loss(-2.0, 0.25), 1.5);
    }

    #[test]
    fn al_density_examples() {
        let v = al_log_density(0.7, 0.7, 2.0, 0.3).unwrap();
        assert!((v - (0.21f64 / 2.0).ln()).abs() < 1e-15);
        let v = al_log_density(1.0, 0.0, 1.0, 0.5).unwrap();
        assert!((v - (0.25f64.ln() - 0.5)).abs() < 1e-15);
        assert!((v + 1.8863).abs() < 1e-4);
        assert!(al_log_density(0.0, 0.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn al_density_integrates_to_one() {
        // Gauss-Legendre on [-150, 0] and [0, 150], split at the kink
        let (nodes, weights) = gauss_legendre_20();
        let mut total = 0.0;
        for (lo, hi) in [(-150.0, 0.0), (0.0, 150.0)] {
            let panels = 200;
            let h = (hi - lo) / panels as f64;
            for k in 0..panels {
                let a = lo + k as f64 * h;
                for (t, w) in nodes.iter().zip(&weights) {
                    let y = a + 0.5 * h * (t + 1.0);
                    total += 0.5 * h * w * al_log_density(y, 0.0, 1.0, 0.3).unwrap().exp();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }

    #[test]
    fn mal_reduces_to_al_when_univariate() {
        let psi = DMatrix::identity(1, 1);
        for &tau in &[0.05, 0.25, 0.5, 0.8, 0.97] {
            let spec = build_spec(&[tau]).unwrap();
            for &delta in &[0.1, 1.0, 3.5] {
                let d = DVector::from_element(1, delta);
                for &y in &[-5.0, -0.3, 0.01, 0.2, 4.0, 17.0] {
                    let mal = mal_log_density(&[y], &[0.1], &spec, &d, &psi).unwrap();
                    let al = al_log_density(y, 0.1, delta, tau).unwrap();
                    assert!((mal - al).abs() < 1e-10, "tau={tau} y={y}: {mal} vs {al}");
                }
            }
        }
    }

    #[test]
    fn density_never_nan_at_location() {
        for p in 1..=4 {
            let spec = build_spec(&vec![0.3; p]).unwrap();
            let d = DVector::from_element(p, 0.5);
            let psi = DMatrix::identity(p, p);
            let mu = vec![1.0; p];
            let v = mal_log_density(&mu, &mu, &spec, &d, &psi).unwrap();
            assert!(v.is_finite(), "p={p}: {v}");
        }
    }

    #[test]
    fn density_rejects_bad_params() {
        let spec = build_spec(&[0.5, 0.5]).unwrap();
        let psi = DMatrix::identity(2, 2);
        let bad_delta = DVector::from_vec(vec![1.0, 0.0]);
        assert!(mal_log_density(&[0.0, 0.0], &[1.0, 1.0], &spec, &bad_delta, &psi).is_err());
        let singular = DMatrix::from_element(2, 2, 1.0);
        let d = DVector::from_element(2, 1.0);
        assert!(matches!(
            mal_log_density(&[0.0, 0.0], &[1.0, 1.0], &spec, &d, &singular),
            Err(Error::Singular(_))
        ));
    }

    /// f(y) = ∫ N(y; μ + Dξ̃w, w·DΣ̃D) e^{-w} dw by quadrature in log w.
    fn mixture_density(y: &[f64], mu: &[f64], spec: &QuantileSpec, delta: &DVector<f64>, psi: &DMatrix<f64>) -> f64 {
        let p = spec.dim();
        let params = ModelParams::new(DMatrix::zeros(p, 1), delta.clone(), psi.clone()).unwrap();
        let scale = params.scale_matrix(spec);
        let chol = scale.clone().cholesky().unwrap();
        let inv = chol.inverse();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let skew: Vec<f64> = (0..p).map(|j| delta[j] * spec.skew()[j]).collect();
        let n = 40_000;
        let (lo, hi) = (-40.0f64, 6.0f64);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let s = lo + i as f64 * h;
            let w = s.exp();
            let r: Vec<f64> = (0..p).map(|j| y[j] - mu[j] - skew[j] * w).collect();
            let mut q = 0.0;
            for a in 0..p {
                for b in 0..p {
                    q += r[a] * inv[(a, b)] * r[b];
                }
            }
            let log_normal =
                -0.5 * p as f64 * (LN_2PI + w.ln()) - 0.5 * logdet - 0.5 * q / w;
            let f = (log_normal - w).exp() * w; // dw = w ds
            let weight = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += weight * f;
        }
        total * h
    }

    #[test]
    fn density_matches_mixture_integral() {
        let spec = build_spec(&[0.25, 0.5, 0.75]).unwrap();
        let delta = DVector::from_vec(vec![0.5, 1.0, 0.8]);
        let psi = corr3();
        let mu = [0.1, -0.2, 0.3];
        for y in [[0.5, 0.1, -0.4], [2.0, 1.0, 1.5], [-1.0, -3.0, 0.0]] {
            let f = mal_log_density(&y, &mu, &spec, &delta, &psi).unwrap().exp();
            let g = mixture_density(&y, &mu, &spec, &delta, &psi);
            assert!((f - g).abs() < 1e-8 * g.max(1e-3), "{f} vs {g}");
        }
        let spec2 = build_spec(&[0.1, 0.6]).unwrap();
        let d2 = DVector::from_vec(vec![1.0, 0.4]);
        let psi2 = DMatrix::from_row_slice(2, 2, &[1.0, -0.6, -0.6, 1.0]);
        for y in [[0.3, 0.2], [3.0, -1.0], [-0.5, 0.5]] {
            let f = mal_log_density(&y, &[0.0, 0.0], &spec2, &d2, &psi2).unwrap().exp();
            let g = mixture_density(&y, &[0.0, 0.0], &spec2, &d2, &psi2);
            assert!((f - g).abs() < 1e-8 * g.max(1e-3), "{f} vs {g}");
        }
    }

    #[test]
    fn identifiability_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = rng.random_range(1..=4);
            let levels: Vec<f64> = (0..p).map(|_| rng.random_range(0.05..0.95)).collect();
            let spec = build_spec(&levels).unwrap();
            let delta = DVector::from_fn(p, |_, _| rng.random_range(0.1..3.0));
            let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
            let cov = &a * a.transpose() + DMatrix::identity(p, p) * 0.2;
            let psi = crate::linalg::normalize_to_correlation(&cov).unwrap();
            let params = ModelParams::new(DMatrix::zeros(p, 2), delta.clone(), psi.clone()).unwrap();
            let scale = params.scale_matrix(&spec);
            let (d2, psi2) = ModelParams::identify_from_scale(&scale, &spec).unwrap();
            assert!((d2 - &delta).amax() < 1e-12);
            assert!((psi2 - &psi).amax() < 1e-12);
        }
    }

    #[test]
    fn sampler_is_deterministic_and_declares_root() {
        let spec = build_spec(&[0.3, 0.7]).unwrap();
        let d = DVector::from_vec(vec![1.0, 2.0]);
        let psi = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        let a = sample_mal(&spec, &[0.0, 1.0], &d, &psi, &mut ChaCha8Rng::seed_from_u64(3), 50).unwrap();
        let b = sample_mal(&spec, &[0.0, 1.0], &d, &psi, &mut ChaCha8Rng::seed_from_u64(3), 50).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.root, MatrixRoot::LowerCholesky);
        assert!(sample_mal(&spec, &[0.0, 1.0], &d, &psi, &mut ChaCha8Rng::seed_from_u64(3), 0).is_err());
    }

    #[test]
    fn sampler_first_two_moments() {
        let spec = build_spec(&[0.25, 0.5, 0.75]).unwrap();
        let delta = DVector::from_vec(vec![0.13, 0.30, 0.23]);
        let psi = corr3();
        let mu = [1.0, -1.0, 0.5];
        let n = 1_000_000;
        let s = sample_mal(&spec, &mu, &delta, &psi, &mut ChaCha8Rng::seed_from_u64(99), n).unwrap();
        let params = ModelParams::new(DMatrix::zeros(3, 1), delta.clone(), psi.clone()).unwrap();
        let scale = params.scale_matrix(&spec);
        let skew: Vec<f64> = (0..3).map(|j| delta[j] * spec.skew()[j]).collect();
        let cov_true = DMatrix::from_fn(3, 3, |i, j| scale[(i, j)] + skew[i] * skew[j]);
        for j in 0..3 {
            let col = s.draws.column(j);
            let mean = col.mean();
            let se = (cov_true[(j, j)] / n as f64).sqrt();
            assert!((mean - mu[j] - skew[j]).abs() < 4.0 * se, "mean {j}");
            let frac = col.iter().filter(|v| **v < mu[j]).count() as f64 / n as f64;
            assert!((frac - spec.levels()[j]).abs() < 0.005);
        }
        let centered = DMatrix::from_fn(n, 3, |i, j| s.draws[(i, j)] - mu[j] - skew[j]);
        let cov = centered.transpose() * &centered / n as f64;
        for i in 0..3 {
            for j in 0..3 {
                let rel = (cov[(i, j)] - cov_true[(i, j)]).abs() / (cov_true[(i, i)] * cov_true[(j, j)]).sqrt();
                assert!(rel < 0.02, "cov ({i},{j}) {} vs {}", cov[(i, j)], cov_true[(i, j)]);
            }
        }
    }

    pub(crate) fn gauss_legendre_20() -> (Vec<f64>, Vec<f64>) {
        // Golub-Welsch would do; a Newton iteration on P_20 is enough here.
        let n = 20;
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            nodes.push(x);
            weights.push(2.0 / ((1.0 - x * x) * dp * dp));
        }
        (nodes, weights)
    }
}
