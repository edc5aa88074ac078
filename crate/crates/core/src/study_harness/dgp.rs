//! Data-generating processes for the simulation studies.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::em_fitter::Dataset;
use crate::error::{Error, Result};
use crate::mal_dist::{build_spec, ModelParams, QuantileSpec};

/// Error law added to `Xβᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorFamily {
    /// `N(0, Dξ̃ξ̃ᵀD + DΣ̃D)`: the MAL's first two moments, centred.
    MalImpliedNormal,
    /// Noncentral multivariate t: `(L z + Dξ̃)/√(V/ν)` with `LLᵀ = DΣ̃D`,
    /// `z` standard normal and `V ~ χ²_ν`.
    StudentT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub tau_levels: Vec<f64>,
    /// p×k, rows are responses and column 0 is the intercept.
    #[serde(with = "matrix_rows")]
    pub beta_true: DMatrix<f64>,
    pub delta_true: Vec<f64>,
    #[serde(with = "matrix_rows")]
    pub psi_true: DMatrix<f64>,
    pub error_family: ErrorFamily,
    #[serde(default = "default_dof")]
    pub t_dof: f64,
    pub seed: u64,
}

fn default_dof() -> f64 {
    3.0
}

pub const PRESET_NAMES: &[&str] = &[
    "table1-panelA",
    "table1-panelB",
    "table1-panelC",
    "table1-panelA-t",
    "table1-panelB-t",
    "table1-panelC-t",
    "table2-panelA",
    "table2-panelB",
    "table2-panelC",
    "table2-panelA-t",
    "table2-panelB-t",
    "table2-panelC-t",
    "table3-panelA",
    "table3-panelB",
    "table3-panelC",
    "table3-panelA-t",
    "table3-panelB-t",
    "table3-panelC-t",
];

pub const TRUE_BETA: [[f64; 3]; 3] = [[-0.382, -0.372, 0.715], [1.993, 0.650, 0.764], [0.670, 1.079, 0.584]];

/// Four covariates; zeros at (response, covariate) = (1,2), (1,4), (2,3),
/// (2,4), (3,2), (3,3), counting covariates from 1 after the intercept.
pub const SPARSE_BETA: [[f64; 5]; 3] = [
    [-0.382, -0.372, 0.0, 0.715, 0.0],
    [1.993, 0.650, 0.764, 0.0, 0.0],
    [0.670, 1.079, 0.0, 0.0, 0.584],
];

pub const TRUE_DELTA: [f64; 3] = [0.13, 0.30, 0.23];

pub const TRUE_PSI: [[f64; 3]; 3] = [[1.0, 0.5, 0.3], [0.5, 1.0, 0.4], [0.3, 0.4, 1.0]];

pub const PANEL_LEVELS: [[f64; 3]; 3] = [[0.5, 0.5, 0.5], [0.25, 0.5, 0.75], [0.10, 0.5, 0.90]];

fn rows_to_matrix<const C: usize>(rows: &[[f64; C]]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), C, |i, j| rows[i][j])
}

impl DgpConfig {
    /// Named configurations of the simulation tables. Tables 1 and 2 share
    /// their designs; the suffix `-t` selects the Student-t errors.
    pub fn preset(name: &str) -> Result<Self> {
        let (stem, family) = match name.strip_suffix("-t") {
            Some(stem) => (stem, ErrorFamily::StudentT),
            None => (name, ErrorFamily::MalImpliedNormal),
        };
        let (table, panel) = stem
            .split_once("-panel")
            .ok_or_else(|| unknown_preset(name))?;
        let levels = match panel {
            "A" => PANEL_LEVELS[0],
            "B" => PANEL_LEVELS[1],
            "C" => PANEL_LEVELS[2],
            _ => return Err(unknown_preset(name)),
        };
        let beta_true = match table {
            "table1" | "table2" => rows_to_matrix(&TRUE_BETA),
            "table3" => rows_to_matrix(&SPARSE_BETA),
            _ => return Err(unknown_preset(name)),
        };
        Ok(Self {
            n: 1000,
            tau_levels: levels.to_vec(),
            beta_true,
            delta_true: TRUE_DELTA.to_vec(),
            psi_true: rows_to_matrix(&TRUE_PSI),
            error_family: family,
            t_dof: default_dof(),
            seed: 0,
        })
    }

    pub fn spec(&self) -> Result<QuantileSpec> {
        build_spec(&self.tau_levels)
    }

    pub fn true_params(&self) -> Result<ModelParams> {
        ModelParams::new(
            self.beta_true.clone(),
            DVector::from_vec(self.delta_true.clone()),
            self.psi_true.clone(),
        )
    }

    pub fn validate(&self) -> Result<QuantileSpec> {
        let spec = self.spec()?;
        let p = spec.dim();
        if self.beta_true.nrows() != p || self.delta_true.len() != p || self.psi_true.nrows() != p {
            return Err(Error::Dimension(format!(
                "{p} quantile levels but beta has {} rows, delta {} entries and psi {} rows",
                self.beta_true.nrows(),
                self.delta_true.len(),
                self.psi_true.nrows()
            )));
        }
        if self.beta_true.ncols() == 0 {
            return Err(Error::Dimension("beta needs an intercept column".into()));
        }
        if self.n <= self.beta_true.ncols() {
            return Err(Error::Domain(format!("need n > k, got n={}", self.n)));
        }
        if !(self.t_dof > 0.0) {
            return Err(Error::Domain(format!("t degrees of freedom must be positive, got {}", self.t_dof)));
        }
        self.true_params()?;
        Ok(spec)
    }
}

fn unknown_preset(name: &str) -> Error {
    Error::Input(format!("unknown preset '{name}'; known: {}", PRESET_NAMES.join(", ")))
}

/// Error covariance `D(ξ̃ξ̃ᵀ + Σ̃)D` of the normal family.
pub fn normal_error_covariance(spec: &QuantileSpec, delta: &[f64], psi: &DMatrix<f64>) -> DMatrix<f64> {
    let p = spec.dim();
    let xi = spec.skew();
    let sigma = spec.sigma_tilde(psi);
    DMatrix::from_fn(p, p, |a, b| delta[a] * delta[b] * (xi[a] * xi[b] + sigma[(a, b)]))
}

/// Draws `n` error vectors (rows) from the configured family.
pub fn sample_errors<R: Rng + ?Sized>(config: &DgpConfig, spec: &QuantileSpec, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = spec.dim();
    let d = &config.delta_true;
    let not_pd = || Error::Singular("error covariance is not positive definite".into());
    let (root, shift) = match config.error_family {
        ErrorFamily::MalImpliedNormal => {
            let cov = normal_error_covariance(spec, d, &config.psi_true);
            (cov.cholesky().ok_or_else(not_pd)?.l(), vec![0.0; p])
        }
        ErrorFamily::StudentT => {
            let sigma = spec.sigma_tilde(&config.psi_true);
            let scale = DMatrix::from_fn(p, p, |a, b| d[a] * d[b] * sigma[(a, b)]);
            let shift = (0..p).map(|j| d[j] * spec.skew()[j]).collect();
            (scale.cholesky().ok_or_else(not_pd)?.l(), shift)
        }
    };
    let chi = match config.error_family {
        ErrorFamily::StudentT => Some(ChiSquared::new(config.t_dof).map_err(|e| Error::Domain(e.to_string()))?),
        ErrorFamily::MalImpliedNormal => None,
    };
    let mut out = DMatrix::zeros(config.n, p);
    let mut z = vec![0.0; p];
    for i in 0..config.n {
        for zj in z.iter_mut() {
            *zj = StandardNormal.sample(rng);
        }
        let mix = match &chi {
            Some(chi) => (chi.sample(rng) / config.t_dof).sqrt().recip(),
            None => 1.0,
        };
        for j in 0..p {
            let mut lz = 0.0;
            for s in 0..=j {
                lz += root[(j, s)] * z[s];
            }
            out[(i, j)] = (lz + shift[j]) * mix;
        }
    }
    Ok(out)
}

/// `X = [1, standard-normal covariates]`, `Y = Xβᵀ + ε`.
pub fn simulate_dataset<R: Rng + ?Sized>(config: &DgpConfig, rng: &mut R) -> Result<Dataset> {
    let spec = config.validate()?;
    let k = config.beta_true.ncols();
    let x = DMatrix::from_fn(config.n, k, |_, s| if s == 0 { 1.0 } else { rng.sample(StandardNormal) });
    let eps = sample_errors(config, &spec, rng)?;
    Dataset::new(&x * config.beta_true.transpose() + eps, x)
}

/// (De)serializes a matrix as a list of rows.
pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("matrix rows have different lengths"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_carry_the_table_values() {
        let c = DgpConfig::preset("table1-panelA").unwrap();
        assert_eq!(c.beta_true[(0, 0)], -0.382);
        assert_eq!(c.beta_true[(1, 0)], 1.993);
        assert_eq!(c.beta_true[(2, 2)], 0.584);
        assert_eq!(c.delta_true, vec![0.13, 0.30, 0.23]);
        assert_eq!(c.psi_true[(0, 2)], 0.3);
        assert_eq!(c.error_family, ErrorFamily::MalImpliedNormal);
        let t = DgpConfig::preset("table3-panelC-t").unwrap();
        assert_eq!(t.tau_levels, vec![0.10, 0.5, 0.90]);
        assert_eq!(t.beta_true.ncols(), 5);
        assert_eq!(t.error_family, ErrorFamily::StudentT);
        for name in PRESET_NAMES {
            DgpConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(DgpConfig::preset("table4-panelA").is_err());
        assert!(DgpConfig::preset("table1-panelD").is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = DgpConfig::preset("table3-panelB-t").unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"student-t\""));
        let back: DgpConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn normal_errors_have_the_stated_covariance() {
        let mut c = DgpConfig::preset("table1-panelB").unwrap();
        c.n = 400_000;
        let spec = c.spec().unwrap();
        let eps = sample_errors(&c, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let target = normal_error_covariance(&spec, &c.delta_true, &c.psi_true);
        let n = c.n as f64;
        for a in 0..3 {
            let mean = eps.column(a).mean();
            assert!(mean.abs() < 4.0 * (target[(a, a)] / n).sqrt());
            for b in 0..3 {
                let cov = eps.column(a).dot(&eps.column(b)) / n;
                let se = ((target[(a, a)] * target[(b, b)] + target[(a, b)].powi(2)) / n).sqrt();
                assert!((cov - target[(a, b)]).abs() < 4.0 * se, "{a}{b}: {cov} vs {}", target[(a, b)]);
            }
        }
    }

    #[test]
    fn t_errors_match_the_mixture_moments() {
        // E[1/√(V/ν)] and E[ν/V] for ν = 5 give the mean and covariance.
        let mut c = DgpConfig::preset("table1-panelC-t").unwrap();
        c.t_dof = 5.0;
        c.n = 400_000;
        let spec = c.spec().unwrap();
        let eps = sample_errors(&c, &spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let nu = 5.0f64;
        let inv_sqrt_mean = (nu / 2.0).sqrt() * gamma_ratio(nu);
        let sigma = spec.sigma_tilde(&c.psi_true);
        for j in 0..3 {
            let shift = c.delta_true[j] * spec.skew()[j];
            let mean = eps.column(j).mean();
            let expected = shift * inv_sqrt_mean;
            let var = c.delta_true[j].powi(2) * sigma[(j, j)] * nu / (nu - 2.0) + shift * shift * nu / (nu - 2.0)
                - expected * expected;
            assert!((mean - expected).abs() < 4.0 * (var / c.n as f64).sqrt(), "{j}: {mean} vs {expected}");
        }
    }

    /// `Γ((ν−1)/2)/Γ(ν/2)` at ν = 5: Γ(2)/Γ(5/2) = 1/(0.75√π).
    fn gamma_ratio(nu: f64) -> f64 {
        assert_eq!(nu, 5.0);
        1.0 / (0.75 * std::f64::consts::PI.sqrt())
    }

    #[test]
    fn simulation_is_deterministic() {
        let c = DgpConfig::preset("table1-panelA-t").unwrap();
        let a = simulate_dataset(&c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = simulate_dataset(&c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.design().column(0).iter().filter(|v| **v == 1.0).count(), 1000);
        assert_eq!((a.n(), a.p(), a.k()), (1000, 3, 3));
    }
}
