//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// Relative jitter added on the first retry, scaled by `trace(A)/N`.
pub const JITTER_BASE: f64 = 1e-12;
/// Jitter grows by this factor on every retry.
pub const JITTER_GROWTH: f64 = 10.0;
/// Retries after the unjittered attempt.
pub const JITTER_RETRIES: usize = 6;

/// Copies a matrix into a row-major buffer.
pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

/// Outcome of a jittered Cholesky solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveInfo {
    /// Diagonal shift that was finally used (0 when none was needed).
    pub jitter: f64,
    pub retries: usize,
}

/// Solves `A X = B` for symmetric positive-definite `A` with Cholesky.
///
/// When the factorization fails, `JITTER_BASE · trace(A)/N` is added to the
/// diagonal and multiplied by `JITTER_GROWTH` on each of at most
/// `JITTER_RETRIES` retries.
pub fn spd_solve_with_jitter(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, SolveInfo)> {
    let n = a.nrows();
    check_dim("square system", n, a.ncols())?;
    check_dim("right-hand side rows", n, b.nrows())?;
    if n == 0 {
        return Err(Error::InvalidInput("empty linear system".into()));
    }
    let scale = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    for retry in 0..=JITTER_RETRIES {
        if retry > 0 {
            jitter = if retry == 1 {
                JITTER_BASE * scale
            } else {
                jitter * JITTER_GROWTH
            };
        }
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            let x = chol.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Ok((x, SolveInfo { jitter, retries: retry }));
            }
        }
    }
    Err(Error::Training(format!(
        "system is singular or indefinite after {JITTER_RETRIES} jitter retries (last jitter {jitter:e})"
    )))
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    check_dim("square matrix", m.nrows(), m.ncols())?;
    if m.nrows() == 0 {
        return Err(Error::InvalidInput("empty matrix".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Maximum absolute deviation of `UᵀU` from the identity.
pub fn orthonormality_defect(u: &DMatrix<f64>) -> f64 {
    let gram = u.transpose() * u;
    let k = gram.nrows();
    (gram - DMatrix::<f64>::identity(k, k)).amax()
}

/// Top-`k` principal directions of the rows of `data`, as the columns of a
/// `d × k` orthonormal matrix ordered by decreasing variance. Each column's
/// largest-magnitude entry is made positive.
pub fn pca_basis(data: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(Error::InvalidInput("PCA needs at least two rows".into()));
    }
    if k == 0 || k > d {
        return Err(Error::InvalidInput(format!("PCA rank {k} not in 1..={d}")));
    }
    let mean = data.row_mean();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = DMatrix::zeros(d, k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        basis.set_column(col, &(v * sign));
    }
    Ok(basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_two_by_two() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let (x, info) = spd_solve_with_jitter(&a, &b).unwrap();
        assert_eq!(info.retries, 0);
        assert!((x[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((x[1] + 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn jitter_rescues_singular_psd() {
        // rank one
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let (x, info) = spd_solve_with_jitter(&a, &b).unwrap();
        assert!(info.retries >= 1 && info.jitter > 0.0);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn indefinite_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert!(matches!(spd_solve_with_jitter(&a, &b), Err(Error::Training(_))));
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let data = DMatrix::from_fn(50, 3, |i, j| {
            let t = i as f64 - 24.5;
            match j {
                0 => 0.0,
                1 => 3.0 * t,
                _ => 0.1 * ((i * 7) % 5) as f64,
            }
        });
        let u = pca_basis(&data, 1).unwrap();
        assert!((u[(1, 0)] - 1.0).abs() < 1e-6);
        assert!(orthonormality_defect(&pca_basis(&data, 3).unwrap()) < 1e-12);
    }
}
