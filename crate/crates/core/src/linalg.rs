//! Symmetric positive-definite solves with a single jitter retry.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factor of `q`. On failure, adds `1e-8 * tr(q) / dim` to the diagonal
/// and retries once.
pub fn cholesky_jitter(q: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("precision matrix has non-finite entries"));
    }
    if let Some(c) = Cholesky::new(q.clone()) {
        return Ok(c);
    }
    let dim = q.nrows().max(1);
    let jitter = 1e-8 * q.trace().abs().max(f64::MIN_POSITIVE) / dim as f64;
    let mut qj = q.clone();
    for i in 0..q.nrows() {
        qj[(i, i)] += jitter;
    }
    Cholesky::new(qj).ok_or_else(|| {
        Error::numerical(format!(
            "precision matrix ({dim}x{dim}) is not positive definite after jitter {jitter:e}"
        ))
    })
}

/// `q^{-1} b` for symmetric positive-definite `q`.
pub fn solve_spd(q: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(cholesky_jitter(q)?.solve(b))
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vecs = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_semidefinite() {
        // rank-deficient PSD matrix: fails plain Cholesky, passes after jitter
        let v = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let q = &v * v.transpose();
        assert!(Cholesky::new(q.clone()).is_none());
        assert!(cholesky_jitter(&q).is_ok());
    }

    #[test]
    fn indefinite_aborts() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = cholesky_jitter(&q).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn solve_identity() {
        let x = solve_spd(&DMatrix::identity(2, 2), &DVector::from_column_slice(&[1.0, 2.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn eigen_sorted() {
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 3.0, 2.0]));
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_eq!(vals.as_slice(), &[3.0, 2.0, 1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-14);
    }
}
