//! Covariate standardization around penalized fits.

use nalgebra::DMatrix;

use crate::em_fitter::Dataset;
use crate::error::{Error, Result};

/// Affine map applied to the non-intercept design columns. Columns are
/// centred only when the design has an intercept to absorb the shift.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    intercept: Option<usize>,
}

/// Rescales every non-intercept column to unit (1/n) variance, centring it
/// when an intercept column exists.
pub fn standardize(data: &Dataset) -> Result<(Dataset, Standardization)> {
    let x = data.design();
    let (n, k) = x.shape();
    let is_intercept = data.intercept_columns();
    let intercept = is_intercept.iter().position(|&c| c);
    let mut center = vec![0.0; k];
    let mut scale = vec![1.0; k];
    for s in (0..k).filter(|&s| !is_intercept[s]) {
        let col = x.column(s);
        let mean = col.mean();
        let c = if intercept.is_some() { mean } else { 0.0 };
        let sd = (col.iter().map(|v| (v - c).powi(2)).sum::<f64>() / n as f64).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Input(format!("design column {s} is constant")));
        }
        center[s] = c;
        scale[s] = sd;
    }
    let z = DMatrix::from_fn(n, k, |i, s| (x[(i, s)] - center[s]) / scale[s]);
    let out = Dataset::new(data.responses().clone(), z)?;
    Ok((out, Standardization { center, scale, intercept }))
}

impl Standardization {
    /// Coefficients on the original covariate scale. Exact zeros stay zero.
    pub fn back_transform(&self, beta: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = beta.clone();
        for j in 0..beta.nrows() {
            let mut shift = 0.0;
            for s in 0..beta.ncols() {
                if Some(s) == self.intercept {
                    continue;
                }
                out[(j, s)] = beta[(j, s)] / self.scale[s];
                shift += out[(j, s)] * self.center[s];
            }
            if let Some(c) = self.intercept {
                out[(j, c)] -= shift;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions_survive_the_round_trip() {
        let y = DMatrix::from_row_slice(5, 1, &[1.0, 3.0, 2.0, 5.0, 4.0]);
        let x = DMatrix::from_row_slice(5, 3, &[1.0, 2.0, 10.0, 1.0, 4.0, 30.0, 1.0, 3.0, 10.0, 1.0, 8.0, 20.0, 1.0, 5.0, 50.0]);
        let data = Dataset::new(y, x.clone()).unwrap();
        let (z, st) = standardize(&data).unwrap();
        for s in 1..3 {
            assert!(z.design().column(s).mean().abs() < 1e-12);
            assert!((z.design().column(s).map(|v| v * v).mean() - 1.0).abs() < 1e-12);
        }
        let beta_z = DMatrix::from_row_slice(1, 3, &[0.7, 0.0, -1.3]);
        let beta = st.back_transform(&beta_z);
        assert_eq!(beta[(0, 1)], 0.0);
        let a = z.design() * beta_z.transpose();
        let b = x * beta.transpose();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn no_intercept_means_no_centring() {
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 4.0]);
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let (z, st) = standardize(&Dataset::new(y, x.clone()).unwrap()).unwrap();
        assert_eq!(st.center, vec![0.0]);
        let beta = st.back_transform(&DMatrix::from_element(1, 1, 2.0));
        assert!(((z.design() * 2.0) - x * beta[(0, 0)]).amax() < 1e-12);
    }
}
