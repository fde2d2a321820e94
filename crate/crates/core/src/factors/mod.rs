//! Factor-graph measurement model.

mod kernel;
mod keys;
mod noise;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::consensus::{BiasedPriorSpec, ConsensusError};
use crate::manifold::{se2_right_jacobian, wrap_angle, ManifoldError, Pose};

pub use kernel::{
    chi2_95, chi2_threshold, graduated_shape, RobustKernel, GM_SHAPE_INDEPENDENT, GM_SHAPE_KIMESA,
    GRADUATED_TARGET_INFLUENCE, INLIER_PROBABILITY, MU_SCHEDULE,
};
pub use keys::{KeyParseError, Owner, RobotId, Value, Values, VarKind, VariableKey};
pub use noise::NoiseModel;

/// Finite-difference step on the retraction.
pub const FD_STEP: f64 = 1e-6;

const MIN_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorError {
    #[error("missing variable {0}")]
    MissingKey(VariableKey),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("variable {0} has the wrong kind for this factor")]
    WrongValueKind(VariableKey),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("probability {0} outside (0, 1)")]
    InvalidProbability(f64),
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("residual not differentiable: {0}")]
    Singular(String),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactorKind {
    PriorPose,
    BetweenPose,
    Range,
    BearingRange,
    LandmarkObs,
    PriorPoint,
    BiasedPrior,
}

#[derive(Debug, Clone)]
pub enum Measurement {
    PriorPose(Pose),
    BetweenPose(Pose),
    Range(f64),
    /// Bearing (1 angle in 2D, azimuth/elevation in 3D) then range, in the first variable's frame.
    BearingRange { bearing: DVector<f64>, range: f64 },
    /// Landmark position in the observing pose's frame.
    LandmarkObs(DVector<f64>),
    PriorPoint(DVector<f64>),
    BiasedPrior(Box<BiasedPriorSpec>),
}

impl Measurement {
    pub fn kind(&self) -> FactorKind {
        match self {
            Measurement::PriorPose(_) => FactorKind::PriorPose,
            Measurement::BetweenPose(_) => FactorKind::BetweenPose,
            Measurement::Range(_) => FactorKind::Range,
            Measurement::BearingRange { .. } => FactorKind::BearingRange,
            Measurement::LandmarkObs(_) => FactorKind::LandmarkObs,
            Measurement::PriorPoint(_) => FactorKind::PriorPoint,
            Measurement::BiasedPrior(_) => FactorKind::BiasedPrior,
        }
    }
}

/// A measurement term over one or two variables.
#[derive(Debug, Clone)]
pub struct Factor {
    keys: Vec<VariableKey>,
    measurement: Measurement,
    noise: NoiseModel,
    kernel: RobustKernel,
    outlier_candidate: bool,
}

fn check_dim(expected: usize, actual: usize) -> Result<(), FactorError> {
    if expected == actual {
        Ok(())
    } else {
        Err(FactorError::DimensionMismatch { expected, actual })
    }
}

fn check_finite(v: &[f64]) -> Result<(), FactorError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FactorError::Manifold(ManifoldError::NonFinite))
    }
}

impl Factor {
    fn build(keys: Vec<VariableKey>, measurement: Measurement, noise: NoiseModel) -> Factor {
        Factor {
            keys,
            measurement,
            noise,
            kernel: RobustKernel::None,
            outlier_candidate: false,
        }
    }

    fn distinct(a: VariableKey, b: VariableKey) -> Result<(), FactorError> {
        if a == b {
            Err(FactorError::InvalidMeasurement(format!("factor connects {a} to itself")))
        } else {
            Ok(())
        }
    }

    pub fn prior_pose(key: VariableKey, pose: Pose, noise: NoiseModel) -> Result<Self, FactorError> {
        if !pose.is_finite() {
            return Err(ManifoldError::NonFinite.into());
        }
        check_dim(pose.tangent_dim(), noise.dim())?;
        Ok(Self::build(vec![key], Measurement::PriorPose(pose), noise))
    }

    pub fn between(a: VariableKey, b: VariableKey, pose: Pose, noise: NoiseModel) -> Result<Self, FactorError> {
        Self::distinct(a, b)?;
        if !pose.is_finite() {
            return Err(ManifoldError::NonFinite.into());
        }
        check_dim(pose.tangent_dim(), noise.dim())?;
        Ok(Self::build(vec![a, b], Measurement::BetweenPose(pose), noise))
    }

    pub fn range(a: VariableKey, b: VariableKey, range: f64, noise: NoiseModel) -> Result<Self, FactorError> {
        Self::distinct(a, b)?;
        check_finite(&[range])?;
        if range < 0.0 {
            return Err(FactorError::InvalidMeasurement(format!("negative range {range}")));
        }
        check_dim(1, noise.dim())?;
        Ok(Self::build(vec![a, b], Measurement::Range(range), noise))
    }

    pub fn bearing_range(
        a: VariableKey,
        b: VariableKey,
        bearing: &[f64],
        range: f64,
        noise: NoiseModel,
    ) -> Result<Self, FactorError> {
        Self::distinct(a, b)?;
        check_finite(bearing)?;
        check_finite(&[range])?;
        if !(1..=2).contains(&bearing.len()) {
            return Err(FactorError::DimensionMismatch {
                expected: 1,
                actual: bearing.len(),
            });
        }
        check_dim(bearing.len() + 1, noise.dim())?;
        let bearing = DVector::from_column_slice(bearing);
        Ok(Self::build(vec![a, b], Measurement::BearingRange { bearing, range }, noise))
    }

    pub fn landmark_obs(pose: VariableKey, landmark: VariableKey, point: &[f64], noise: NoiseModel) -> Result<Self, FactorError> {
        Self::distinct(pose, landmark)?;
        check_finite(point)?;
        if !(2..=3).contains(&point.len()) {
            return Err(FactorError::DimensionMismatch {
                expected: 3,
                actual: point.len(),
            });
        }
        check_dim(point.len(), noise.dim())?;
        let m = Measurement::LandmarkObs(DVector::from_column_slice(point));
        Ok(Self::build(vec![pose, landmark], m, noise))
    }

    pub fn prior_point(key: VariableKey, point: &[f64], noise: NoiseModel) -> Result<Self, FactorError> {
        check_finite(point)?;
        check_dim(point.len(), noise.dim())?;
        let m = Measurement::PriorPoint(DVector::from_column_slice(point));
        Ok(Self::build(vec![key], m, noise))
    }

    /// A (robust) weighted biased prior; its noise model is the Σ_s weighting.
    pub fn biased_prior(spec: BiasedPriorSpec, kernel: RobustKernel) -> Self {
        let noise = spec.weights().clone();
        let key = spec.key();
        let mut f = Self::build(vec![key], Measurement::BiasedPrior(Box::new(spec)), noise);
        f.kernel = kernel;
        f
    }

    pub fn with_kernel(mut self, kernel: RobustKernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn as_outlier_candidate(mut self) -> Self {
        self.outlier_candidate = true;
        self
    }

    pub fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    pub fn kind(&self) -> FactorKind {
        self.measurement.kind()
    }

    pub fn measurement(&self) -> &Measurement {
        &self.measurement
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn kernel(&self) -> RobustKernel {
        self.kernel
    }

    pub fn set_kernel(&mut self, kernel: RobustKernel) {
        self.kernel = kernel;
    }

    pub fn is_outlier_candidate(&self) -> bool {
        self.outlier_candidate
    }

    pub fn biased_prior_spec(&self) -> Option<&BiasedPriorSpec> {
        match &self.measurement {
            Measurement::BiasedPrior(s) => Some(s),
            _ => None,
        }
    }

    /// Residual dimension.
    pub fn dim(&self) -> usize {
        self.noise.dim()
    }

    fn gather<'a>(&self, values: &'a Values) -> Result<Vec<&'a Value>, FactorError> {
        self.keys
            .iter()
            .map(|k| values.get(k).ok_or(FactorError::MissingKey(*k)))
            .collect()
    }

    fn pose_of<'a>(&self, slot: usize, v: &'a Value) -> Result<&'a Pose, FactorError> {
        v.as_pose().ok_or(FactorError::WrongValueKind(self.keys[slot]))
    }

    /// Unwhitened error `prediction − measurement` for the given variable states.
    pub fn error_at(&self, vals: &[&Value]) -> Result<DVector<f64>, FactorError> {
        check_dim(self.keys.len(), vals.len())?;
        let e = match &self.measurement {
            Measurement::PriorPose(m) => {
                let x = self.pose_of(0, vals[0])?;
                m.local(x)?.into_inner()
            }
            Measurement::BetweenPose(m) => {
                let a = self.pose_of(0, vals[0])?;
                let b = self.pose_of(1, vals[1])?;
                m.local(&a.between(b))?.into_inner()
            }
            Measurement::Range(d) => {
                let dist = (vals[1].position() - vals[0].position()).norm();
                if dist < MIN_RANGE {
                    return Err(FactorError::Singular(format!(
                        "range between coincident {} and {}",
                        self.keys[0], self.keys[1]
                    )));
                }
                DVector::from_element(1, dist - d)
            }
            Measurement::BearingRange { bearing, range } => {
                let a = self.pose_of(0, vals[0])?;
                let p = a.inverse_transform_point(&vals[1].position());
                let pred = bearing_range_of(&p, bearing.len());
                let mut e = DVector::zeros(bearing.len() + 1);
                for i in 0..bearing.len() {
                    e[i] = wrap_angle(pred[i] - bearing[i]);
                }
                e[bearing.len()] = pred[bearing.len()] - range;
                e
            }
            Measurement::LandmarkObs(m) => {
                let a = self.pose_of(0, vals[0])?;
                let p = a.inverse_transform_point(&vals[1].position());
                DVector::from_iterator(m.len(), (0..m.len()).map(|i| p[i] - m[i]))
            }
            Measurement::PriorPoint(m) => {
                let x = vals[0].as_point().ok_or(FactorError::WrongValueKind(self.keys[0]))?;
                check_dim(m.len(), x.len())?;
                x - m
            }
            Measurement::BiasedPrior(spec) => spec.error(vals[0])?,
        };
        check_dim(self.noise.dim(), e.len())?;
        Ok(e)
    }

    pub fn whitened_at(&self, vals: &[&Value]) -> Result<DVector<f64>, FactorError> {
        Ok(self.noise.whiten(&self.error_at(vals)?))
    }

    /// Whitened residual `Σ^{-1/2}(prediction − measurement)`.
    pub fn residual(&self, values: &Values) -> Result<DVector<f64>, FactorError> {
        let vals = self.gather(values)?;
        self.whitened_at(&vals)
    }

    /// Squared norm of the whitened residual.
    pub fn squared_error(&self, values: &Values) -> Result<f64, FactorError> {
        Ok(self.residual(values)?.norm_squared())
    }

    /// `½ ρ(‖r‖²)` with the factor's own kernel.
    pub fn cost(&self, values: &Values) -> Result<f64, FactorError> {
        Ok(0.5 * self.kernel.value(self.squared_error(values)?))
    }

    /// Whether the squared whitened residual passes the χ²(0.95) test.
    pub fn is_consistent(&self, values: &Values) -> Result<bool, FactorError> {
        Ok(self.squared_error(values)? < chi2_95(self.dim()))
    }

    /// Whitened Jacobians, one per key, w.r.t. right-retraction coordinates.
    pub fn jacobian(&self, values: &Values) -> Result<Vec<DMatrix<f64>>, FactorError> {
        let vals = self.gather(values)?;
        self.jacobian_at(&vals)
    }

    pub fn jacobian_at(&self, vals: &[&Value]) -> Result<Vec<DMatrix<f64>>, FactorError> {
        let all = vec![true; vals.len()];
        Ok(self.jacobian_masked(vals, &all)?.into_iter().map(|j| j.expect("requested")).collect())
    }

    /// Whitened Jacobians for the slots flagged in `wanted` only.
    pub fn jacobian_masked(&self, vals: &[&Value], wanted: &[bool]) -> Result<Vec<Option<DMatrix<f64>>>, FactorError> {
        check_dim(self.keys.len(), vals.len())?;
        check_dim(vals.len(), wanted.len())?;
        let full = match &self.measurement {
            Measurement::Range(_) => self.range_jacobian(vals)?,
            Measurement::PriorPoint(_) => {
                check_dim(self.noise.dim(), vals[0].tangent_dim())?;
                let id = DMatrix::identity(self.noise.dim(), self.noise.dim());
                vec![self.noise.whiten_matrix(&id)]
            }
            Measurement::PriorPose(_) => match self.pose_of(0, vals[0])?.adjoint_se2() {
                Some(_) => {
                    let e = self.error_at(vals)?;
                    let jinv = planar_jr_inverse(&e, self.keys[0])?;
                    vec![self.noise.whiten_matrix(&jinv)]
                }
                None => return self.numeric_jacobian_masked(vals, wanted),
            },
            Measurement::BetweenPose(_) => {
                let (a, b) = (self.pose_of(0, vals[0])?, self.pose_of(1, vals[1])?);
                match b.between(a).adjoint_se2() {
                    Some(ad) => {
                        let e = self.error_at(vals)?;
                        let jinv = planar_jr_inverse(&e, self.keys[0])?;
                        vec![self.noise.whiten_matrix(&-(&jinv * to_dmatrix(&ad))), self.noise.whiten_matrix(&jinv)]
                    }
                    None => return self.numeric_jacobian_masked(vals, wanted),
                }
            }
            Measurement::BiasedPrior(spec) => match spec.jacobian(vals[0]) {
                Some(j) => vec![self.noise.whiten_matrix(&j)],
                None => return self.numeric_jacobian_masked(vals, wanted),
            },
            _ => return self.numeric_jacobian_masked(vals, wanted),
        };
        Ok(full.into_iter().zip(wanted).map(|(j, w)| w.then_some(j)).collect())
    }

    /// Central finite differences of the whitened residual.
    pub fn numeric_jacobian(&self, vals: &[&Value]) -> Result<Vec<DMatrix<f64>>, FactorError> {
        let all = vec![true; vals.len()];
        Ok(self
            .numeric_jacobian_masked(vals, &all)?
            .into_iter()
            .map(|j| j.expect("requested"))
            .collect())
    }

    fn numeric_jacobian_masked(&self, vals: &[&Value], wanted: &[bool]) -> Result<Vec<Option<DMatrix<f64>>>, FactorError> {
        let m = self.dim();
        let mut out = Vec::with_capacity(vals.len());
        for slot in 0..vals.len() {
            if !wanted[slot] {
                out.push(None);
                continue;
            }
            let n = vals[slot].tangent_dim();
            let mut j = DMatrix::zeros(m, n);
            let mut delta = vec![0.0; n];
            for c in 0..n {
                delta[c] = FD_STEP;
                let plus = vals[slot].retract(&delta);
                delta[c] = -FD_STEP;
                let minus = vals[slot].retract(&delta);
                delta[c] = 0.0;
                let mut work: Vec<&Value> = vals.to_vec();
                work[slot] = &plus;
                let rp = self.whitened_at(&work)?;
                work[slot] = &minus;
                let rm = self.whitened_at(&work)?;
                j.set_column(c, &((rp - rm) / (2.0 * FD_STEP)));
            }
            out.push(Some(j));
        }
        Ok(out)
    }

    fn range_jacobian(&self, vals: &[&Value]) -> Result<Vec<DMatrix<f64>>, FactorError> {
        let d = vals[1].position() - vals[0].position();
        let dist = d.norm();
        if dist < MIN_RANGE {
            return Err(FactorError::Singular(format!(
                "range between coincident {} and {}",
                self.keys[0], self.keys[1]
            )));
        }
        let u = d / dist;
        let row = |v: &Value, sign: f64| -> DMatrix<f64> {
            match v {
                Value::Pose(p) => {
                    // t ← t + R δt to first order; rotation does not move the origin.
                    let n = p.tangent_dim();
                    let rot = n - p.dim();
                    let ru = p.rotation().inverse().rotate(&u);
                    let mut j = DMatrix::zeros(1, n);
                    for k in 0..p.dim() {
                        j[(0, rot + k)] = sign * ru[k];
                    }
                    j
                }
                Value::Point(x) => DMatrix::from_fn(1, x.len(), |_, k| sign * u[k]),
            }
        };
        Ok(vec![
            self.noise.whiten_matrix(&row(vals[0], -1.0)),
            self.noise.whiten_matrix(&row(vals[1], 1.0)),
        ])
    }
}

/// Bearing(s) then range of a point expressed in the sensor frame.
pub fn bearing_range_of(p: &Vector3<f64>, bearing_dims: usize) -> DVector<f64> {
    if bearing_dims == 1 {
        DVector::from_column_slice(&[p.y.atan2(p.x), p.xy().norm()])
    } else {
        let horiz = p.xy().norm();
        DVector::from_column_slice(&[p.y.atan2(p.x), p.z.atan2(horiz), p.norm()])
    }
}

fn to_dmatrix(m: &nalgebra::Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

/// Inverse right Jacobian of the SE(2) exponential at the error `e`.
fn planar_jr_inverse(e: &DVector<f64>, key: VariableKey) -> Result<DMatrix<f64>, FactorError> {
    se2_right_jacobian(e.as_slice())
        .try_inverse()
        .map(|m| to_dmatrix(&m))
        .ok_or_else(|| FactorError::Singular(format!("pose error at {key} is at the SE(2) cut locus")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::FRAC_PI_2;

    fn p(i: u64) -> VariableKey {
        VariableKey::pose(0, i)
    }

    fn vals(entries: Vec<(VariableKey, Value)>) -> Values {
        entries.into_iter().collect()
    }

    fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    #[test]
    fn exact_between_is_zero() {
        let a = Pose::se2(1.0, -2.0, 0.4);
        let b = Pose::se2(3.0, 0.5, -1.1);
        let f = Factor::between(p(0), p(1), a.between(&b), NoiseModel::isotropic(3, 0.1).unwrap()).unwrap();
        let v = vals(vec![(p(0), Value::Pose(a)), (p(1), Value::Pose(b))]);
        assert!(f.residual(&v).unwrap().norm() < 1e-12);
    }

    #[test]
    fn range_345() {
        let f = Factor::range(p(0), p(1), 5.0, NoiseModel::isotropic(1, 1.0).unwrap()).unwrap();
        let v = vals(vec![
            (p(0), Value::Pose(Pose::se2(0.0, 0.0, 0.0))),
            (p(1), Value::Pose(Pose::se2(3.0, 4.0, 0.0))),
        ]);
        assert!(f.residual(&v).unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn prior_rotation_residual_scales_by_sigma() {
        let q = UnitQuaternion::from_euler_angles(0.0, 0.0, FRAC_PI_2);
        let m = Pose::se3(q, Vector3::zeros());
        let f = Factor::prior_pose(p(0), m, NoiseModel::diagonal(&[0.1, 0.1, 0.1, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let v = vals(vec![(p(0), Value::Pose(Pose::identity(3)))]);
        let r = f.residual(&v).unwrap();
        let rot = r.rows(0, 3).norm();
        assert!((rot - FRAC_PI_2 / 0.1).abs() < 1e-9);
        assert!(r.rows(3, 3).norm() < 1e-12);
    }

    #[test]
    fn scalar_prior_jacobian() {
        // Residual is prediction − measurement, so d r / d x = +1/σ.
        let k = VariableKey::landmark(0);
        let f = Factor::prior_point(k, &[2.0], NoiseModel::isotropic(1, 0.5).unwrap()).unwrap();
        let v = vals(vec![(k, Value::point(&[3.0]))]);
        let j = f.jacobian(&v).unwrap();
        assert!((j[0][(0, 0)] - 2.0).abs() < 1e-12);
        let num = f.numeric_jacobian(&[v.get(&k).unwrap()]).unwrap();
        assert!((num[0][(0, 0)] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn between_jacobian_at_identity_matches_derivative() {
        let f = Factor::between(p(0), p(1), Pose::identity(2), NoiseModel::isotropic(3, 1.0).unwrap()).unwrap();
        let v = vals(vec![
            (p(0), Value::Pose(Pose::identity(2))),
            (p(1), Value::Pose(Pose::identity(2))),
        ]);
        let j = f.jacobian(&v).unwrap();
        // At identity: ∂/∂δb = I and ∂/∂δa = −I.
        let id = DMatrix::<f64>::identity(3, 3);
        assert!(rel_frob(&j[1], &id) < 1e-5);
        assert!(rel_frob(&j[0], &(-&id)) < 1e-5);
    }

    #[test]
    fn coincident_range_errors() {
        let f = Factor::range(p(0), p(1), 0.0, NoiseModel::isotropic(1, 1.0).unwrap()).unwrap();
        let v = vals(vec![
            (p(0), Value::Pose(Pose::se2(1.0, 1.0, 0.0))),
            (p(1), Value::Pose(Pose::se2(1.0, 1.0, 2.0))),
        ]);
        assert!(matches!(f.residual(&v), Err(FactorError::Singular(_))));
        assert!(matches!(f.jacobian(&v), Err(FactorError::Singular(_))));
    }

    #[test]
    fn missing_key_and_dims() {
        let f = Factor::range(p(0), p(1), 1.0, NoiseModel::isotropic(1, 1.0).unwrap()).unwrap();
        let v = vals(vec![(p(0), Value::Pose(Pose::identity(2)))]);
        assert_eq!(f.residual(&v), Err(FactorError::MissingKey(p(1))));
        assert!(Factor::between(p(0), p(1), Pose::identity(2), NoiseModel::isotropic(6, 1.0).unwrap()).is_err());
        assert!(Factor::between(p(0), p(0), Pose::identity(2), NoiseModel::isotropic(3, 1.0).unwrap()).is_err());
        assert!(Factor::bearing_range(p(0), p(1), &[0.1, 0.2, 0.3], 1.0, NoiseModel::isotropic(4, 1.0).unwrap()).is_err());
    }

    #[test]
    fn bearing_wraps() {
        let lm = VariableKey::landmark(1);
        let f = Factor::bearing_range(p(0), lm, &[std::f64::consts::PI - 0.01], 1.0, NoiseModel::isotropic(2, 0.1).unwrap()).unwrap();
        let v = vals(vec![
            (p(0), Value::Pose(Pose::identity(2))),
            (lm, Value::point(&[(-std::f64::consts::PI + 0.01).cos(), (-std::f64::consts::PI + 0.01).sin()])),
        ]);
        let e = f.error_at(&[v.get(&p(0)).unwrap(), v.get(&lm).unwrap()]).unwrap();
        assert!((e[0] - 0.02).abs() < 1e-9, "{e}");
    }

    fn random_pose(rng: &mut ChaCha8Rng, spatial: bool) -> Pose {
        if spatial {
            let q = UnitQuaternion::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.4..1.4), rng.random_range(-3.0..3.0));
            Pose::se3(q, Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
        } else {
            Pose::se2(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0))
        }
    }

    fn gaussian_perturb(rng: &mut ChaCha8Rng, sigmas: &[f64]) -> Vec<f64> {
        sigmas.iter().map(|s| Normal::new(0.0, *s).unwrap().sample(rng)).collect()
    }

    /// Every measurement kind, with exact measurements at `truth`.
    fn all_kinds(rng: &mut ChaCha8Rng, spatial: bool) -> (Vec<Factor>, Values) {
        let a = random_pose(rng, spatial);
        let b = random_pose(rng, spatial);
        let lm = VariableKey::landmark(9);
        let n = a.tangent_dim();
        let d = a.dim();
        let lpos = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), if spatial { rng.random_range(-5.0..5.0) } else { 0.0 });
        let lval = Value::Point(DVector::from_iterator(d, lpos.iter().take(d).copied()));
        let truth = vals(vec![(p(0), Value::Pose(a)), (p(1), Value::Pose(b)), (lm, lval)]);
        let sig: Vec<f64> = (0..n).map(|i| if i < n - d { 0.05 } else { 0.2 }).collect();
        let local = a.inverse_transform_point(&lpos);
        let br = bearing_range_of(&a.inverse_transform_point(b.translation()), d - 1);
        let factors = vec![
            Factor::prior_pose(p(0), a, NoiseModel::diagonal(&sig).unwrap()).unwrap(),
            Factor::between(p(0), p(1), a.between(&b), NoiseModel::diagonal(&sig).unwrap()).unwrap(),
            Factor::range(p(0), p(1), (b.translation() - a.translation()).norm(), NoiseModel::isotropic(1, 0.1).unwrap()).unwrap(),
            Factor::range(p(1), lm, (lpos - b.translation()).norm(), NoiseModel::isotropic(1, 0.1).unwrap()).unwrap(),
            Factor::bearing_range(p(0), p(1), br.as_slice()[..d - 1].as_ref(), br[d - 1], NoiseModel::isotropic(d, 0.05).unwrap()).unwrap(),
            Factor::landmark_obs(p(0), lm, &local.as_slice()[..d], NoiseModel::isotropic(d, 0.1).unwrap()).unwrap(),
            Factor::prior_point(lm, &lpos.as_slice()[..d], NoiseModel::isotropic(d, 0.3).unwrap()).unwrap(),
        ];
        (factors, truth)
    }

    #[test]
    fn exact_measurements_have_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spatial in [false, true] {
            for _ in 0..20 {
                let (fs, truth) = all_kinds(&mut rng, spatial);
                for f in &fs {
                    assert!(f.squared_error(&truth).unwrap() < 1e-18, "{:?}", f.kind());
                }
            }
        }
    }

    #[test]
    fn analytic_jacobians_match_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..100 {
            let (fs, mut truth) = all_kinds(&mut rng, trial % 2 == 1);
            // Move off the exact configuration.
            let keys: Vec<_> = truth.keys().copied().collect();
            for k in keys {
                let v = truth.get(&k).unwrap();
                let d: Vec<f64> = (0..v.tangent_dim()).map(|_| rng.random_range(-0.3..0.3)).collect();
                let moved = v.retract(&d);
                truth.insert(k, moved);
            }
            for f in fs.iter().filter(|f| matches!(f.kind(), FactorKind::Range | FactorKind::PriorPoint | FactorKind::PriorPose | FactorKind::BetweenPose)) {
                let vs: Vec<&Value> = f.keys().iter().map(|k| truth.get(k).unwrap()).collect();
                let an = f.jacobian_at(&vs).unwrap();
                let nu = f.numeric_jacobian(&vs).unwrap();
                for (a, n) in an.iter().zip(&nu) {
                    assert!(rel_frob(a, n) < 1e-5, "{:?}: {a} vs {n}", f.kind());
                }
            }
        }
    }

    #[test]
    fn gaussian_residuals_pass_chi2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut total, mut pass) = (0usize, 0usize);
        while total < 10_000 {
            let spatial = total % 2 == 0;
            let (fs, truth) = all_kinds(&mut rng, spatial);
            for f in &fs {
                // Perturb the measured quantity through the states: draw whitened noise e,
                // then the squared residual of (truth, m + Σ^{1/2} e) is ‖e‖².
                let dim = f.dim();
                let e = DVector::from_vec(gaussian_perturb(&mut rng, &vec![1.0; dim]));
                let noisy = f.noise().unwhiten(&e);
                let m = perturbed_measurement(f, &noisy);
                let s = m.squared_error(&truth).unwrap();
                total += 1;
                if s < chi2_95(dim) {
                    pass += 1;
                }
            }
        }
        let frac = pass as f64 / total as f64;
        assert!(frac >= 0.93, "{frac}");
    }

    fn perturbed_measurement(f: &Factor, noise: &DVector<f64>) -> Factor {
        let n = f.noise().clone();
        let k = f.keys();
        let mut out = match f.measurement() {
            Measurement::PriorPose(m) => Factor::prior_pose(k[0], m.retract(noise.as_slice()), n),
            Measurement::BetweenPose(m) => Factor::between(k[0], k[1], m.retract(noise.as_slice()), n),
            Measurement::Range(d) => Factor::range(k[0], k[1], (d - noise[0]).abs(), n),
            Measurement::BearingRange { bearing, range } => {
                let b: Vec<f64> = bearing.iter().zip(noise.iter()).map(|(b, e)| b - e).collect();
                Factor::bearing_range(k[0], k[1], &b, range - noise[bearing.len()], n)
            }
            Measurement::LandmarkObs(m) => Factor::landmark_obs(k[0], k[1], (m - noise).as_slice(), n),
            Measurement::PriorPoint(m) => Factor::prior_point(k[0], (m - noise).as_slice(), n),
            Measurement::BiasedPrior(_) => unreachable!(),
        }
        .unwrap();
        out.outlier_candidate = f.outlier_candidate;
        out
    }

    proptest! {
        #[test]
        fn between_jacobian_matches_oracle(x in -4.0f64..4.0, y in -4.0f64..4.0, th in -3.0f64..3.0, x2 in -4.0f64..4.0, th2 in -3.0f64..3.0) {
            let a = Pose::se2(x, y, th);
            let b = Pose::se2(x2, -y, th2);
            let m = Pose::se2(0.3, 0.1, 0.2);
            let f = Factor::between(p(0), p(1), m, NoiseModel::diagonal(&[0.1, 0.5, 0.5]).unwrap()).unwrap();
            let va = Value::Pose(a);
            let vb = Value::Pose(b);
            let j = f.jacobian_at(&[&va, &vb]).unwrap();
            // Independent oracle: one-sided differences with a smaller step.
            let base = f.whitened_at(&[&va, &vb]).unwrap();
            prop_assume!(base[0].abs() * 0.1 < 3.0);
            for (slot, jm) in j.iter().enumerate() {
                let mut oracle = DMatrix::zeros(3, 3);
                for c in 0..3 {
                    let mut d = [0.0; 3];
                    d[c] = 1e-8;
                    let (pa, pb) = if slot == 0 { (va.retract(&d), vb.clone()) } else { (va.clone(), vb.retract(&d)) };
                    let r = f.whitened_at(&[&pa, &pb]).unwrap();
                    oracle.set_column(c, &((r - &base) / 1e-8));
                }
                prop_assert!(rel_frob(jm, &oracle) < 1e-5, "{} vs {}", jm, oracle);
            }
        }
    }
}
