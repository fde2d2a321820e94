use nalgebra::{DMatrix, DVector};

use super::FactorError;

/// Gaussian noise model used to whiten residuals.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// Per-dimension standard deviations.
    Diagonal(DVector<f64>),
    /// Upper-triangular square-root information `U` with `UᵀU = Σ⁻¹`.
    Full(DMatrix<f64>),
}

impl NoiseModel {
    pub fn diagonal(sigmas: &[f64]) -> Result<Self, FactorError> {
        if sigmas.is_empty() || sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(FactorError::InvalidNoise(format!("sigmas {sigmas:?}")));
        }
        Ok(NoiseModel::Diagonal(DVector::from_column_slice(sigmas)))
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self, FactorError> {
        Self::diagonal(&vec![sigma; dim])
    }

    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self, FactorError> {
        let bad = || FactorError::InvalidNoise("covariance is not symmetric positive definite".into());
        if !cov.is_square() || cov.nrows() == 0 || (cov - cov.transpose()).amax() > 1e-12 * cov.amax() {
            return Err(bad());
        }
        let info = cov.clone().cholesky().ok_or_else(bad)?.inverse();
        let l = info.cholesky().ok_or_else(bad)?.unpack();
        Ok(NoiseModel::Full(l.transpose()))
    }

    pub fn dim(&self) -> usize {
        match self {
            NoiseModel::Diagonal(s) => s.len(),
            NoiseModel::Full(u) => u.nrows(),
        }
    }

    pub fn sigmas(&self) -> Option<&DVector<f64>> {
        match self {
            NoiseModel::Diagonal(s) => Some(s),
            NoiseModel::Full(_) => None,
        }
    }

    pub fn whiten(&self, e: &DVector<f64>) -> DVector<f64> {
        match self {
            NoiseModel::Diagonal(s) => e.component_div(s),
            NoiseModel::Full(u) => u * e,
        }
    }

    pub fn unwhiten(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            NoiseModel::Diagonal(s) => r.component_mul(s),
            NoiseModel::Full(u) => u
                .solve_upper_triangular(r)
                .expect("square-root information is nonsingular"),
        }
    }

    /// Whitens every column of `j`.
    pub fn whiten_matrix(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            NoiseModel::Diagonal(s) => {
                let mut out = j.clone();
                for (mut row, sigma) in out.row_iter_mut().zip(s.iter()) {
                    row /= *sigma;
                }
                out
            }
            NoiseModel::Full(u) => u * j,
        }
    }

    /// Squared Mahalanobis norm of an unwhitened error.
    pub fn mahalanobis_sq(&self, e: &DVector<f64>) -> f64 {
        self.whiten(e).norm_squared()
    }
}
