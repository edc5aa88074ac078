//! Modified Bessel functions of the third kind and the two moments of the
//! Generalized Inverse Gaussian (GIG) law that drive the E-step.
//!
//! `K_ν(x)` is evaluated in log space. For the reduced order
//! `μ ∈ [-1/2, 1/2]` we use Temme's series when `x < 2` and Steed's
//! continued fraction (CF2) otherwise, then recur upwards in the ratio
//! `K_{ν+1}/K_ν`, which never overflows. `K_{-ν} = K_ν` handles negative
//! orders.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Floor on the GIG `b` parameter (the Mahalanobis term `m̃`), applied as
/// the offset `m̃ + MIN_INVERSE_RATE`.
pub const MIN_INVERSE_RATE: f64 = 1e-12;

/// Parameters of `GIG(ν, a, b)` with density proportional to
/// `w^{ν-1} exp(-(a w + b / w) / 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigParams {
    pub order: f64,
    /// `a`, the coefficient of `w`.
    pub rate: f64,
    /// `b`, the coefficient of `1/w`.
    pub inverse_rate: f64,
}

impl GigParams {
    pub fn new(order: f64, rate: f64, inverse_rate: f64) -> Result<Self> {
        if !order.is_finite() {
            return Err(Error::Domain(format!("GIG order must be finite, got {order}")));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::Domain(format!("GIG rate must be positive, got {rate}")));
        }
        if !(inverse_rate > 0.0 && inverse_rate.is_finite()) {
            return Err(Error::Domain(format!(
                "GIG inverse rate must be positive, got {inverse_rate}"
            )));
        }
        Ok(Self {
            order,
            rate,
            inverse_rate,
        })
    }
}

fn check_arg(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "Bessel K argument must be positive and finite, got {x}"
        )))
    }
}

/// `ln K_ν(x)`.
pub fn log_bessel_k(order: f64, x: f64) -> Result<f64> {
    check_arg(x)?;
    if !order.is_finite() {
        return Err(Error::Domain(format!("Bessel order must be finite, got {order}")));
    }
    Ok(log_k_and_ratio(order.abs(), x).0)
}

/// `K_{ν+1}(x) / K_ν(x)`.
pub fn bessel_k_ratio(order: f64, x: f64) -> Result<f64> {
    check_arg(x)?;
    if !order.is_finite() {
        return Err(Error::Domain(format!("Bessel order must be finite, got {order}")));
    }
    Ok(ratio_any_order(order, x))
}

/// Returns `(E[W], E[1/W])` for `W ~ GIG(ν, a, b)`.
///
/// `E[1/W]` is computed as `√(a/b)·K_{ν-1}/K_ν`, which equals
/// `√(a/b)·K_{ν+1}/K_ν − 2ν/b` but avoids the cancellation of the latter
/// when `b` is tiny.
pub fn gig_moments(params: &GigParams) -> (f64, f64) {
    let GigParams {
        order,
        rate: a,
        inverse_rate: b,
    } = *params;
    let omega = (a * b).sqrt();
    let up = ratio_any_order(order, omega);
    // K_{ν-1}/K_ν = 1 / (K_ν/K_{ν-1})
    let down = 1.0 / ratio_any_order(order - 1.0, omega);
    let mean = (b / a).sqrt() * up;
    let inverse_mean = (a / b).sqrt() * down;
    (mean, inverse_mean)
}

fn ratio_any_order(order: f64, x: f64) -> f64 {
    if order >= 0.0 {
        log_k_and_ratio(order, x).1
    } else if order <= -1.0 {
        // K_{ν+1}/K_ν = K_a/K_{a+1} with a = -ν-1 >= 0
        1.0 / log_k_and_ratio(-order - 1.0, x).1
    } else {
        let (ln_hi, _) = log_k_and_ratio(order + 1.0, x);
        let (ln_lo, _) = log_k_and_ratio(-order, x);
        (ln_hi - ln_lo).exp()
    }
}

/// `(ln K_a(x), K_{a+1}(x)/K_a(x))` for `a >= 0`.
fn log_k_and_ratio(a: f64, x: f64) -> (f64, f64) {
    if a == 0.5 {
        return (0.5 * (PI / (2.0 * x)).ln() - x, 1.0 + 1.0 / x);
    }
    log_k_and_ratio_general(a, x)
}

pub(crate) fn log_k_and_ratio_general(a: f64, x: f64) -> (f64, f64) {
    let steps = (a + 0.5).floor();
    let mu = a - steps;
    let (mut ln_k, mut ratio) = if x < 2.0 {
        temme_series(mu, x)
    } else {
        steed_cf2(mu, x)
    };
    let steps = steps as usize;
    for i in 0..steps {
        ln_k += ratio.ln();
        ratio = 2.0 * (mu + i as f64 + 1.0) / x + 1.0 / ratio;
    }
    (ln_k, ratio)
}

// Chebyshev expansions of Temme's auxiliary gamma functions on |μ| <= 1/2
// (as tabulated in GSL's specfunc/gamma.c).
const G1_CHEB: [f64; 14] = [
    -1.145164083662683,
    0.006360853113470843,
    0.0018624519300720684,
    0.0001528330858734535,
    1.7017464011802038e-05,
    -6.459750292334725e-07,
    -5.181984843251938e-08,
    4.518909289485818e-10,
    3.243322737102087e-11,
    6.830943402494752e-13,
    2.8353502755172103e-14,
    -7.98839057693236e-16,
    -3.372667730077195e-17,
    -3.658633480921052e-20,
];

const G2_CHEB: [f64; 15] = [
    1.8826455249496719,
    -0.07749065839616752,
    -0.01825671484732493,
    0.0006338030209074896,
    7.62290543508729e-05,
    -9.550164756172044e-07,
    -8.892726810788635e-08,
    -1.9521334772319614e-09,
    -9.400305273588516e-11,
    4.687513384953239e-12,
    2.265853574692576e-13,
    -1.1725509698488015e-15,
    -7.044133820024522e-17,
    -2.4377878310107696e-18,
    -7.52252432182539e-20,
];

fn chebyshev(coeffs: &[f64], t: f64) -> f64 {
    let t2 = 2.0 * t;
    let mut d = 0.0;
    let mut dd = 0.0;
    for &c in coeffs[1..].iter().rev() {
        let tmp = d;
        d = t2 * d - dd + c;
        dd = tmp;
    }
    t * d - dd + 0.5 * coeffs[0]
}

/// Temme's series for `K_μ(x)`, `K_{μ+1}(x)`, valid for `|μ| <= 1/2`, small `x`.
fn temme_series(mu: f64, x: f64) -> (f64, f64) {
    let t = 4.0 * mu.abs() - 1.0;
    let g1 = chebyshev(&G1_CHEB, t);
    let g2 = chebyshev(&G2_CHEB, t);
    let inv_gamma_1mmu = 1.0 / (g2 + mu * g1);
    let inv_gamma_1pmu = 1.0 / (g2 - mu * g1);

    let half_x = 0.5 * x;
    let ln_half_x = half_x.ln();
    let half_x_mu = (mu * ln_half_x).exp();
    let pi_mu = PI * mu;
    let sigma = -mu * ln_half_x;
    let sinrat = if pi_mu.abs() < f64::EPSILON {
        1.0
    } else {
        pi_mu / pi_mu.sin()
    };
    let sinhrat = if sigma.abs() < f64::EPSILON {
        1.0
    } else {
        sigma.sinh() / sigma
    };

    let mut fk = sinrat * (sigma.cosh() * g1 - sinhrat * ln_half_x * g2);
    let mut pk = 0.5 / half_x_mu * inv_gamma_1pmu;
    let mut qk = 0.5 * half_x_mu * inv_gamma_1mmu;
    let mut ck = 1.0;
    let mut sum0 = fk;
    let mut sum1 = pk;
    let quarter_x2 = half_x * half_x;
    for k in 1..500 {
        let k = k as f64;
        fk = (k * fk + pk + qk) / (k * k - mu * mu);
        ck *= quarter_x2 / k;
        pk /= k - mu;
        qk /= k + mu;
        let hk = -k * fk + pk;
        let del0 = ck * fk;
        sum0 += del0;
        sum1 += ck * hk;
        if del0.abs() < 0.5 * sum0.abs() * f64::EPSILON {
            break;
        }
    }
    let k_mu = sum0;
    let k_mu1 = sum1 * 2.0 / x;
    (k_mu.ln(), k_mu1 / k_mu)
}

/// Steed's continued fraction (Temme's CF2) for `x >= 2`, `|μ| <= 1/2`.
fn steed_cf2(mu: f64, x: f64) -> (f64, f64) {
    let mut bi = 2.0 * (1.0 + x);
    let mut di = 1.0 / bi;
    let mut delhi = di;
    let mut hi = di;
    let mut qi = 0.0;
    let mut qip1 = 1.0;
    let mut ai = -(0.25 - mu * mu);
    let a1 = ai;
    let mut ci = -ai;
    let mut bqi = -ai;
    let mut s = 1.0 + bqi * delhi;
    for i in 2..10_000 {
        ai -= 2.0 * (i - 1) as f64;
        ci = -ai * ci / i as f64;
        let tmp = (qi - bi * qip1) / ai;
        qi = qip1;
        qip1 = tmp;
        bqi += ci * qip1;
        bi += 2.0;
        di = 1.0 / (bi + ai * di);
        delhi = (bi * di - 1.0) * delhi;
        hi += delhi;
        let dels = bqi * delhi;
        s += dels;
        if (dels / s).abs() < f64::EPSILON {
            break;
        }
    }
    hi *= -a1;
    let ln_k = 0.5 * (PI / (2.0 * x)).ln() - s.ln() - x;
    let ratio = (mu + x + 0.5 - hi) / x;
    (ln_k, ratio)
}
