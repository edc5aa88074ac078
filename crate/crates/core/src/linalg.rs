//! Small dense helpers shared by the fitters.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Smallest eigenvalue a correlation matrix may have and still be accepted.
pub const MIN_CORRELATION_EIGENVALUE: f64 = 1e-10;

/// Eigenvalue floor used when repairing an indefinite correlation estimate.
pub const REPAIR_EIGENVALUE_FLOOR: f64 = 1e-8;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Checks that `psi` is a symmetric, unit-diagonal, positive definite matrix.
pub fn validate_correlation(psi: &DMatrix<f64>) -> Result<()> {
    let p = psi.nrows();
    if psi.ncols() != p {
        return Err(Error::Dimension(format!(
            "correlation matrix must be square, got {}x{}",
            p,
            psi.ncols()
        )));
    }
    for i in 0..p {
        if !psi[(i, i)].is_finite() || (psi[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "correlation matrix diagonal entry {i} is {} (expected 1)",
                psi[(i, i)]
            )));
        }
        for j in (i + 1)..p {
            let (a, b) = (psi[(i, j)], psi[(j, i)]);
            if !a.is_finite() || (a - b).abs() > 1e-12 {
                return Err(Error::Domain(format!(
                    "correlation matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let lmin = min_eigenvalue(psi);
    if lmin <= MIN_CORRELATION_EIGENVALUE {
        return Err(Error::Singular(format!(
            "correlation matrix smallest eigenvalue {lmin:e} <= {MIN_CORRELATION_EIGENVALUE:e}"
        )));
    }
    Ok(())
}

/// Rescales a symmetric matrix with positive diagonal to unit diagonal.
/// Returns `None` when a diagonal entry is not strictly positive.
pub fn normalize_to_correlation(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let p = m.nrows();
    let mut scale = Vec::with_capacity(p);
    for i in 0..p {
        let d = m[(i, i)];
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        scale.push(1.0 / d.sqrt());
    }
    let mut out = DMatrix::from_fn(p, p, |i, j| m[(i, j)] * scale[i] * scale[j]);
    symmetrize(&mut out);
    for i in 0..p {
        out[(i, i)] = 1.0;
    }
    Some(out)
}

/// Eigenvalue clipping at `floor` followed by renormalization to unit
/// diagonal. Repeats a few times since renormalizing can push the smallest
/// eigenvalue back under the floor.
pub fn repair_correlation(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut current = m.clone();
    symmetrize(&mut current);
    for _ in 0..20 {
        let eig = SymmetricEigen::new(current.clone());
        let clipped = eig.eigenvalues.map(|v| v.max(floor));
        let rebuilt = &eig.eigenvectors
            * DMatrix::from_diagonal(&clipped)
            * eig.eigenvectors.transpose();
        current = normalize_to_correlation(&rebuilt)
            .unwrap_or_else(|| DMatrix::identity(m.nrows(), m.nrows()));
        if min_eigenvalue(&current) > MIN_CORRELATION_EIGENVALUE {
            return current;
        }
    }
    DMatrix::identity(m.nrows(), m.nrows())
}

/// Solves `a x = b` for symmetric positive definite `a`, reporting the
/// columns of `a` that make it singular when the Cholesky factorization fails.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => Err(Error::RankDeficient {
            columns: dependent_columns(a),
        }),
    }
}

/// Indices of columns of a Gram matrix that are (numerically) linear
/// combinations of earlier columns, found by a pivot-free Gram-Schmidt pass.
pub fn dependent_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let k = gram.nrows();
    let scale = (0..k).map(|i| gram[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut l = DMatrix::<f64>::zeros(k, k);
    let mut bad = Vec::new();
    for j in 0..k {
        let mut d = gram[(j, j)];
        for s in 0..j {
            d -= l[(j, s)] * l[(j, s)];
        }
        if d <= 1e-12 * scale.max(gram[(j, j)].abs()) {
            bad.push(j);
            continue;
        }
        let piv = d.sqrt();
        l[(j, j)] = piv;
        for i in (j + 1)..k {
            let mut v = gram[(i, j)];
            for s in 0..j {
                v -= l[(i, s)] * l[(j, s)];
            }
            l[(i, j)] = v / piv;
        }
    }
    bad
}
