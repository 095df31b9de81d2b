//! Predictor-side and response-side energies of a coefficient matrix.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Energies {
    /// Squared row norms, one per predictor.
    pub predictor: Vec<f64>,
    /// Squared column norms, one per response.
    pub response: Vec<f64>,
    /// Singular values, decreasing.
    pub singular_values: Vec<f64>,
}

impl Energies {
    /// Fraction of the total energy carried by each singular direction.
    pub fn singular_fractions(&self) -> Vec<f64> {
        let total: f64 = self.singular_values.iter().map(|d| d * d).sum();
        if total == 0.0 {
            return vec![0.0; self.singular_values.len()];
        }
        self.singular_values.iter().map(|d| d * d / total).collect()
    }
}

pub fn svd_energies(b: &DMatrix<f64>) -> Result<Energies> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("coefficient matrix has non-finite entries"));
    }
    let predictor = b.row_iter().map(|r| r.norm_squared()).collect();
    let response = b.column_iter().map(|c| c.norm_squared()).collect();
    let mut singular_values: Vec<f64> = if b.is_empty() {
        Vec::new()
    } else {
        let sv: DVector<f64> = b.clone().singular_values();
        sv.iter().copied().collect()
    };
    singular_values.sort_by(|a, b| b.total_cmp(a));
    Ok(Energies {
        predictor,
        response,
        singular_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_zero() {
        let e = svd_energies(&DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 3.0]))).unwrap();
        assert_eq!(e.predictor, vec![4.0, 9.0]);
        assert_eq!(e.response, vec![4.0, 9.0]);
        assert!((e.singular_values[0] - 3.0).abs() < 1e-14);
        let e = svd_energies(&DMatrix::zeros(3, 2)).unwrap();
        assert!(e.predictor.iter().chain(&e.response).chain(&e.singular_values).all(|&v| v == 0.0));
    }

    #[test]
    fn frobenius_identity() {
        let b = DMatrix::from_fn(5, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.7);
        let e = svd_energies(&b).unwrap();
        let fro = b.norm_squared();
        let sx: f64 = e.predictor.iter().sum();
        let sy: f64 = e.response.iter().sum();
        let sd: f64 = e.singular_values.iter().map(|d| d * d).sum();
        assert!((sx - fro).abs() < 1e-10 && (sy - fro).abs() < 1e-10 && (sd - fro).abs() < 1e-10);
    }
}
