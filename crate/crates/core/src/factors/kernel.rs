use std::sync::OnceLock;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::FactorError;

/// Control-parameter schedule for graduated non-convexity.
pub const MU_SCHEDULE: [f64; 5] = [0.0, 0.5, 0.9, 0.95, 1.0];
/// Geman-McClure shape used by the Independent baseline.
pub const GM_SHAPE_INDEPENDENT: f64 = 3.0;
/// Geman-McClure shape used by kiMESA.
pub const GM_SHAPE_KIMESA: f64 = 6.0;
/// Influence a graduated kernel assigns to a χ²(0.95) residual once fully non-convex.
pub const GRADUATED_TARGET_INFLUENCE: f64 = 0.1;
/// Probability used for inlier tests.
pub const INLIER_PROBABILITY: f64 = 0.95;

/// Robust loss `ρ(r²)` applied to a squared whitened residual.
///
/// The graduated family is `ρ_μ(s) = s / (1 + μ s / c²)`: quadratic at
/// `μ = 0` and Geman-McClure with shape `c` at `μ = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustKernel {
    None,
    GemanMcClure { c: f64 },
    Graduated { mu: f64, c: f64 },
}

impl RobustKernel {
    /// Graduated kernel at `μ = 0`, shaped for a residual of dimension `dim`.
    pub fn graduated(dim: usize) -> Self {
        RobustKernel::Graduated {
            mu: 0.0,
            c: graduated_shape(dim),
        }
    }

    pub fn value(&self, r2: f64) -> f64 {
        match *self {
            RobustKernel::None => r2,
            RobustKernel::GemanMcClure { c } => {
                let c2 = c * c;
                c2 * r2 / (c2 + r2)
            }
            RobustKernel::Graduated { mu, c } => r2 / (1.0 + mu * r2 / (c * c)),
        }
    }

    /// `∂ρ/∂r²`.
    pub fn influence(&self, r2: f64) -> f64 {
        match *self {
            RobustKernel::None => 1.0,
            RobustKernel::GemanMcClure { c } => {
                let c2 = c * c;
                let d = c2 + r2;
                c2 * c2 / (d * d)
            }
            RobustKernel::Graduated { mu, c } => {
                let d = 1.0 + mu * r2 / (c * c);
                1.0 / (d * d)
            }
        }
    }

    pub fn is_graduated(&self) -> bool {
        matches!(self, RobustKernel::Graduated { .. })
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        match *self {
            RobustKernel::Graduated { c, .. } => RobustKernel::Graduated { mu, c },
            other => other,
        }
    }
}

/// Shape `c` such that a fully non-convex graduated kernel has influence
/// [`GRADUATED_TARGET_INFLUENCE`] at the χ²(0.95) quantile of `dim` dofs.
pub fn graduated_shape(dim: usize) -> f64 {
    let s = chi2_95(dim);
    // (1 + s/c²)⁻² = target  ⇒  c² = s / (target^{-1/2} − 1)
    let c2 = s / (GRADUATED_TARGET_INFLUENCE.powf(-0.5) - 1.0);
    c2.sqrt()
}

/// Quantile of the χ² distribution with `dim` degrees of freedom.
pub fn chi2_threshold(dim: usize, t: f64) -> Result<f64, FactorError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(FactorError::InvalidProbability(t));
    }
    if dim == 0 {
        return Err(FactorError::DimensionMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let dist = ChiSquared::new(dim as f64).expect("positive dof");
    Ok(dist.inverse_cdf(t))
}

const CACHED_DIMS: usize = 16;

/// `chi2_threshold(dim, 0.95)`, cached for small dimensions.
pub fn chi2_95(dim: usize) -> f64 {
    static CACHE: OnceLock<[f64; CACHED_DIMS]> = OnceLock::new();
    let table = CACHE.get_or_init(|| {
        let mut t = [0.0; CACHED_DIMS];
        for (d, slot) in t.iter_mut().enumerate().skip(1) {
            *slot = chi2_threshold(d, INLIER_PROBABILITY).unwrap();
        }
        t
    });
    if dim < CACHED_DIMS {
        table[dim]
    } else {
        chi2_threshold(dim, INLIER_PROBABILITY).unwrap()
    }
}
