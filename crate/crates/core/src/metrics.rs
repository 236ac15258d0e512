use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::frobenius;

/// A relative Frobenius error reported twice: as is, and divided by the
/// number of simulated steps `n_s * k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetric {
    /// `||ref - approx||_F / ||ref||_F`
    pub relative: f64,
    /// `relative / (n_s * k)`
    pub scaled: f64,
}

impl ErrorMetric {
    pub fn from_relative(relative: f64, n_s: usize, k: usize) -> Self {
        Self {
            relative,
            scaled: relative / (n_s * k) as f64,
        }
    }
}

pub fn relative_error(reference: &DMatrix<f64>, approx: &DMatrix<f64>, n_s: usize, k: usize) -> Result<ErrorMetric> {
    if reference.shape() != approx.shape() {
        return Err(Error::Shape(format!(
            "reference is {:?}, approximation is {:?}",
            reference.shape(),
            approx.shape()
        )));
    }
    if n_s == 0 || k == 0 {
        return Err(Error::Usage("n_s and k must be positive".into()));
    }
    let denom = frobenius(reference);
    if denom == 0.0 {
        return Err(Error::ZeroReference("reference matrix has zero norm".into()));
    }
    let diff = reference - approx;
    Ok(ErrorMetric::from_relative(frobenius(&diff) / denom, n_s, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_matrices_have_zero_error() {
        let a = DMatrix::from_fn(3, 4, |i, j| (i + 2 * j) as f64);
        let e = relative_error(&a, &a, 1, 4).unwrap();
        assert_eq!(e.relative, 0.0);
        assert_eq!(e.scaled, 0.0);
    }

    #[test]
    fn zero_prediction_is_full_loss() {
        let a = DMatrix::from_fn(2, 1, |i, _| 1.0 + i as f64);
        let e = relative_error(&a, &DMatrix::zeros(2, 1), 1, 1).unwrap();
        assert_eq!(e.relative, 1.0);
        assert_eq!(e.scaled, 1.0);
    }

    #[test]
    fn zero_reference_is_guarded() {
        let z = DMatrix::zeros(2, 2);
        assert!(matches!(relative_error(&z, &z, 1, 1), Err(Error::ZeroReference(_))));
    }
}
