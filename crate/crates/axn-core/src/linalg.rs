//! Small dense linear algebra helpers.
//!
//! The least-squares solve uses a one-sided Jacobi SVD written here rather
//! than a library routine: the solver must behave correctly on exactly
//! rank-deficient and under-determined systems (they are the common case
//! early in a search, when fewer items than dimensions have been scored),
//! and Jacobi's column rotations keep full accuracy there.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided Jacobi SVD of a matrix given as columns: rotates column pairs
/// until mutually orthogonal. On return `cols[j]` is `sigma_j * u_j` and
/// `right[j]` (length = number of columns) is the matching right singular
/// vector; `sigmas[j] = ||cols[j]||`. Singular values are not sorted.
fn jacobi_svd_columns(cols: &mut [Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = cols.len();
    let mut right: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let eps = 1e-14;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(j);
                let (ci, cj) = (&mut lo[i], &mut hi[0]);
                for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
                let (lo, hi) = right.split_at_mut(j);
                let (ri, rj) = (&mut lo[i], &mut hi[0]);
                for (a, b) in ri.iter_mut().zip(rj.iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigmas: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    (right, sigmas)
}

/// Minimum-norm least-squares solution of `A x = b`.
///
/// `a_rows` are the rows of the `m x n` system matrix, `b` the targets.
/// Singular values at or below `rel_tol * sigma_max` are treated as zero,
/// so rank-deficient and under-determined systems yield the minimum-norm
/// minimizer.
pub fn min_norm_lstsq(a_rows: &[&[f64]], b: &[f64], rel_tol: f64) -> Result<Vec<f64>> {
    let m = a_rows.len();
    if m == 0 {
        return Err(Error::DegenerateInput(
            "least-squares system has no rows".into(),
        ));
    }
    let n = a_rows[0].len();
    if n == 0 {
        return Err(Error::DegenerateInput(
            "least-squares system has no columns".into(),
        ));
    }
    if a_rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch(
            "ragged rows in least-squares system".into(),
        ));
    }
    if b.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {} rows",
            b.len(),
            m
        )));
    }

    // factor whichever of A / A^T has the fewer columns; the rotation
    // count is quadratic in that number
    let mut x = vec![0.0; n];
    if m >= n {
        // A = U Sigma V^T: scaled-u columns pair with b, right vectors
        // span the solution
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|j| a_rows.iter().map(|r| r[j]).collect())
            .collect();
        let (right, sigmas) = jacobi_svd_columns(&mut cols);
        let sigma_max = sigmas.iter().cloned().fold(0.0, f64::max);
        let cutoff = rel_tol * sigma_max;
        for j in 0..n {
            if sigmas[j] <= cutoff || sigmas[j] == 0.0 {
                continue;
            }
            // u_j . b = (scaled col_j . b) / sigma_j
            let coeff = dot(&cols[j], b) / (sigmas[j] * sigmas[j]);
            for (xc, rc) in x.iter_mut().zip(&right[j]) {
                *xc += coeff * rc;
            }
        }
    } else {
        // factor A^T = W Sigma Z^T, i.e. A = Z Sigma W^T; columns of W
        // span the solution, z vectors pair with b
        let mut cols: Vec<Vec<f64>> = a_rows.iter().map(|r| r.to_vec()).collect();
        let (z, sigmas) = jacobi_svd_columns(&mut cols);
        let sigma_max = sigmas.iter().cloned().fold(0.0, f64::max);
        let cutoff = rel_tol * sigma_max;
        for j in 0..m {
            if sigmas[j] <= cutoff || sigmas[j] == 0.0 {
                continue;
            }
            let coeff = dot(&z[j], b) / (sigmas[j] * sigmas[j]);
            for (xc, wc) in x.iter_mut().zip(&cols[j]) {
                *xc += coeff * wc;
            }
        }
    }
    Ok(x)
}
