//! SE(2)/SE(3) poses and the Lie-group operations the solver and the
//! consensus layer are built on.
//!
//! Tangent vectors always list rotation coordinates first and translation
//! coordinates second: `(θ, ρx, ρy)` for SE(2) and `(ωx, ωy, ωz, ρx, ρy, ρz)`
//! for SE(3). Every per-component weight in the crate indexes into this order.
//!
//! Retraction is right-multiplicative: `x ⊕ δ = x ∘ Exp(δ)`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DVector, Matrix2, Matrix3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

const SMALL_ANGLE: f64 = 1e-6;
const SERIES_ANGLE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    #[error("non-finite value in manifold input")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("rotations are antipodal; interpolation is undefined")]
    Antipodal,
    #[error("interpolation fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// A rotation in the plane (angle) or in space (unit quaternion).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rotation {
    Planar(f64),
    Spatial(UnitQuaternion<f64>),
}

impl Rotation {
    pub fn planar(angle: f64) -> Self {
        Rotation::Planar(wrap_angle(angle))
    }

    /// Builds a spatial rotation, renormalizing the quaternion.
    pub fn spatial(q: UnitQuaternion<f64>) -> Self {
        Rotation::Spatial(UnitQuaternion::new_normalize(q.into_inner()))
    }

    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        Rotation::spatial(UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    pub fn dim(&self) -> usize {
        match self {
            Rotation::Planar(_) => 2,
            Rotation::Spatial(_) => 3,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            Rotation::Planar(_) => 1,
            Rotation::Spatial(_) => 3,
        }
    }

    fn identity_like(&self) -> Self {
        match self {
            Rotation::Planar(_) => Rotation::Planar(0.0),
            Rotation::Spatial(_) => Rotation::Spatial(UnitQuaternion::identity()),
        }
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        match (self, other) {
            (Rotation::Planar(a), Rotation::Planar(b)) => Rotation::planar(a + b),
            (Rotation::Spatial(a), Rotation::Spatial(b)) => Rotation::spatial(a * b),
            _ => panic!("composing rotations of different dimension"),
        }
    }

    pub fn inverse(&self) -> Rotation {
        match self {
            Rotation::Planar(a) => Rotation::planar(-a),
            Rotation::Spatial(q) => Rotation::Spatial(q.inverse()),
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        match self {
            Rotation::Planar(a) => a.abs(),
            Rotation::Spatial(q) => q.angle(),
        }
    }

    /// Rotates a 3-vector; planar rotations act on the xy components.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Rotation::Planar(a) => {
                let (s, c) = a.sin_cos();
                Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
            }
            Rotation::Spatial(q) => q * v,
        }
    }

    pub fn log(&self) -> DVector<f64> {
        match self {
            Rotation::Planar(a) => DVector::from_element(1, *a),
            Rotation::Spatial(q) => {
                let w = q.scaled_axis();
                DVector::from_column_slice(w.as_slice())
            }
        }
    }

    fn exp_like(&self, w: &[f64]) -> Rotation {
        match self {
            Rotation::Planar(_) => Rotation::planar(w[0]),
            Rotation::Spatial(_) => {
                Rotation::spatial(UnitQuaternion::from_scaled_axis(Vector3::new(w[0], w[1], w[2])))
            }
        }
    }

    /// Column-major entries of the rotation matrix.
    pub fn matrix_entries(&self) -> Vec<f64> {
        match self {
            Rotation::Planar(a) => {
                let m = Matrix2::new(a.cos(), -a.sin(), a.sin(), a.cos());
                m.as_slice().to_vec()
            }
            Rotation::Spatial(q) => q.to_rotation_matrix().matrix().as_slice().to_vec(),
        }
    }

    pub fn matrix3(&self) -> Matrix3<f64> {
        match self {
            Rotation::Planar(a) => {
                let (s, c) = a.sin_cos();
                Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
            }
            Rotation::Spatial(q) => *q.to_rotation_matrix().matrix(),
        }
    }

    /// Yaw angle (planar angle, or the z Euler angle of a spatial rotation).
    pub fn yaw(&self) -> f64 {
        match self {
            Rotation::Planar(a) => *a,
            Rotation::Spatial(q) => q.euler_angles().2,
        }
    }
}

/// A rigid transform in SE(2) or SE(3).
///
/// Planar poses keep `translation.z == 0`.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Rotation,
    translation: Vector3<f64>,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rotation {
            Rotation::Planar(a) => write!(
                f,
                "SE2(x={:.6}, y={:.6}, θ={:.6})",
                self.translation.x, self.translation.y, a
            ),
            Rotation::Spatial(q) => write!(
                f,
                "SE3(t=[{:.6}, {:.6}, {:.6}], q=[{:.6}, {:.6}, {:.6}, {:.6}])",
                self.translation.x, self.translation.y, self.translation.z, q.i, q.j, q.k, q.w
            ),
        }
    }
}

impl Pose {
    pub fn se2(x: f64, y: f64, theta: f64) -> Self {
        Pose {
            rotation: Rotation::planar(theta),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    pub fn se3(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Rotation::spatial(rotation),
            translation,
        }
    }

    pub fn from_parts(rotation: Rotation, translation: Vector3<f64>) -> Self {
        let translation = match rotation {
            Rotation::Planar(_) => Vector3::new(translation.x, translation.y, 0.0),
            Rotation::Spatial(_) => translation,
        };
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity(dim: usize) -> Self {
        match dim {
            2 => Pose::se2(0.0, 0.0, 0.0),
            3 => Pose::se3(UnitQuaternion::identity(), Vector3::zeros()),
            d => panic!("unsupported pose dimension {d}"),
        }
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Translation restricted to the pose dimension.
    pub fn translation_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.translation.as_slice()[..self.dim()])
    }

    /// Spatial dimension `N` (2 or 3).
    pub fn dim(&self) -> usize {
        self.rotation.dim()
    }

    /// Tangent-space dimension `p` (3 or 6).
    pub fn tangent_dim(&self) -> usize {
        match self.rotation {
            Rotation::Planar(_) => 3,
            Rotation::Spatial(_) => 6,
        }
    }

    pub fn identity_like(&self) -> Pose {
        Pose::identity(self.dim())
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        assert_eq!(self.dim(), other.dim(), "composing poses of different dimension");
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.translation + self.rotation.rotate(&other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose {
            rotation: rinv,
            translation: -rinv.rotate(&self.translation),
        }
    }

    /// Adjoint of a planar pose in rotation-first coordinates; `None` for SE(3).
    pub fn adjoint_se2(&self) -> Option<Matrix3<f64>> {
        let Rotation::Planar(theta) = self.rotation else {
            return None;
        };
        let (s, c) = theta.sin_cos();
        let t = self.translation;
        Some(Matrix3::new(1.0, 0.0, 0.0, t.y, c, -s, -t.x, s, c))
    }

    /// `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.translation + self.rotation.rotate(p)
    }

    /// Expresses a world point in this pose's frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse().rotate(&(p - self.translation))
    }

    pub fn is_finite(&self) -> bool {
        let rot_ok = match self.rotation {
            Rotation::Planar(a) => a.is_finite(),
            Rotation::Spatial(q) => q.coords.iter().all(|c| c.is_finite()),
        };
        rot_ok && self.translation.iter().all(|c| c.is_finite())
    }

    pub fn log(&self) -> Result<TangentVector, ManifoldError> {
        if !self.is_finite() {
            return Err(ManifoldError::NonFinite);
        }
        let v = match self.rotation {
            Rotation::Planar(theta) => {
                let rho = se2_v_inverse(theta) * Vector2::new(self.translation.x, self.translation.y);
                DVector::from_vec(vec![theta, rho.x, rho.y])
            }
            Rotation::Spatial(q) => {
                let w = q.scaled_axis();
                let rho = so3_v_inverse(&w) * self.translation;
                DVector::from_vec(vec![w.x, w.y, w.z, rho.x, rho.y, rho.z])
            }
        };
        Ok(TangentVector(v))
    }

    pub fn exp(v: &TangentVector) -> Result<Pose, ManifoldError> {
        if v.0.iter().any(|c| !c.is_finite()) {
            return Err(ManifoldError::NonFinite);
        }
        match v.len() {
            3 => {
                let theta = v[0];
                let t = se2_v(theta) * Vector2::new(v[1], v[2]);
                Ok(Pose::se2(t.x, t.y, theta))
            }
            6 => {
                let w = Vector3::new(v[0], v[1], v[2]);
                let rho = Vector3::new(v[3], v[4], v[5]);
                let t = so3_v(&w) * rho;
                Ok(Pose::se3(UnitQuaternion::from_scaled_axis(w), t))
            }
            n => Err(ManifoldError::DimensionMismatch {
                expected: 6,
                actual: n,
            }),
        }
    }

    /// `self ∘ Exp(delta)`.
    pub fn retract(&self, delta: &[f64]) -> Pose {
        let v = TangentVector(DVector::from_column_slice(delta));
        let e = Pose::exp(&v).expect("retraction with invalid tangent");
        assert_eq!(e.dim(), self.dim(), "retraction dimension mismatch");
        self.compose(&e)
    }

    /// `Log(self⁻¹ ∘ other)`.
    pub fn local(&self, other: &Pose) -> Result<TangentVector, ManifoldError> {
        self.between(other).log()
    }

    /// Interpolates translation linearly and rotation along the geodesic.
    pub fn split_interpolate(a: &Pose, b: &Pose, t: f64) -> Result<Pose, ManifoldError> {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(ManifoldError::InvalidFraction(t));
        }
        if a.dim() != b.dim() {
            return Err(ManifoldError::DimensionMismatch {
                expected: a.dim(),
                actual: b.dim(),
            });
        }
        let rel = a.rotation.inverse().compose(&b.rotation);
        if (rel.angle() - PI).abs() < 1e-9 {
            return Err(ManifoldError::Antipodal);
        }
        let translation = a.translation * (1.0 - t) + b.translation * t;
        let w: Vec<f64> = rel.log().iter().map(|c| c * t).collect();
        let rotation = a.rotation.compose(&rel.exp_like(&w));
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Non-constant matrix elements: rotation entries in column-major order,
    /// then translation. Length `N² + N`.
    pub fn chordal_vec(&self) -> DVector<f64> {
        let mut v = self.rotation.matrix_entries();
        v.extend_from_slice(&self.translation.as_slice()[..self.dim()]);
        DVector::from_vec(v)
    }

    /// Keeps one block from `self` and the other from `other`.
    pub fn with_rotation_of(&self, other: &Pose) -> Pose {
        Pose::from_parts(other.rotation, self.translation)
    }

    pub fn rotation_identity_like(&self) -> Rotation {
        self.rotation.identity_like()
    }
}

/// A tangent vector, rotation coordinates first.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(pub DVector<f64>);

impl TangentVector {
    pub fn zeros(len: usize) -> Self {
        TangentVector(DVector::zeros(len))
    }

    pub fn from_slice(s: &[f64]) -> Self {
        TangentVector(DVector::from_column_slice(s))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// Number of leading rotation coordinates.
    pub fn rotation_len(&self) -> usize {
        match self.0.len() {
            3 => 1,
            6 => 3,
            _ => 0,
        }
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for TangentVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn se2_v(theta: f64) -> Matrix2<f64> {
    let (a, b) = if theta.abs() < SMALL_ANGLE {
        (1.0 - theta * theta / 6.0, theta / 2.0 - theta.powi(3) / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta)
    };
    Matrix2::new(a, -b, b, a)
}

/// Right Jacobian of the SE(2) exponential at `(θ, ρx, ρy)`.
pub fn se2_right_jacobian(v: &[f64]) -> Matrix3<f64> {
    let (theta, r1, r2) = (v[0], v[1], v[2]);
    let (a, b, c1, c2) = if theta.abs() < SERIES_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, theta / 2.0 - theta * t2 / 24.0, theta / 6.0 - theta * t2 / 120.0, 0.5 - t2 / 24.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / theta, (theta - s) / t2, (1.0 - c) / t2)
    };
    Matrix3::new(1.0, 0.0, 0.0, r1 * c1 - r2 * c2, a, b, r1 * c2 + r2 * c1, -b, a)
}

fn se2_v_inverse(theta: f64) -> Matrix2<f64> {
    let v = se2_v(theta);
    let (a, b) = (v[(0, 0)], v[(1, 0)]);
    let d = a * a + b * b;
    Matrix2::new(a / d, b / d, -b / d, a / d)
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn so3_v(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    let k2 = k * k;
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta * theta / 24.0, 1.0 / 6.0 - theta * theta / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Matrix3::identity() + k * b + k2 * c
}

fn so3_v_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    let k2 = k * k;
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = theta / 2.0;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - k * 0.5 + k2 * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Pose, b: &Pose, tol: f64) -> bool {
        let d = a.between(b);
        d.rotation().angle() < tol && d.translation().norm() < tol
    }

    fn arb_se2() -> impl Strategy<Value = Pose> {
        (-10.0..10.0f64, -10.0..10.0f64, -3.1..3.1f64).prop_map(|(x, y, t)| Pose::se2(x, y, t))
    }

    fn arb_se3() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-10.0..10.0f64),
            prop::array::uniform3(-1.0..1.0f64),
            0.0..2.8f64,
        )
            .prop_map(|(t, axis, angle)| {
                let a = Vector3::from(axis);
                let a = if a.norm() < 1e-3 { Vector3::z() } else { a.normalize() };
                Pose::se3(
                    UnitQuaternion::from_scaled_axis(a * angle),
                    Vector3::from(t),
                )
            })
    }

    #[test]
    fn compose_identity_and_inverse() {
        let p = Pose::se2(1.5, -2.0, 0.7);
        assert!(close(&Pose::identity(2).compose(&p), &p, 1e-12));
        assert!(close(&p.compose(&p.inverse()), &Pose::identity(2), 1e-12));
    }

    #[test]
    fn compose_se2_by_hand() {
        let a = Pose::se2(1.0, 0.0, PI / 2.0);
        let b = Pose::se2(1.0, 0.0, 0.0);
        let c = a.compose(&b);
        // R(π/2)·(1,0) = (0,1), plus (1,0).
        assert!((c.translation().x - 1.0).abs() < 1e-12);
        assert!((c.translation().y - 1.0).abs() < 1e-12);
        assert!((c.rotation().yaw() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn log_identity_is_zero() {
        assert_eq!(Pose::identity(2).log().unwrap().norm(), 0.0);
        assert_eq!(Pose::identity(3).log().unwrap().norm(), 0.0);
    }

    #[test]
    fn exp_se2_quarter_turn_translation() {
        // Integrate the constant twist (ω = π/2, v = (π/2, 0)) over unit time.
        let steps = 200_000;
        let dt = 1.0 / steps as f64;
        let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..steps {
            let mid = th + 0.5 * dt * (PI / 2.0);
            x += (PI / 2.0) * mid.cos() * dt;
            y += (PI / 2.0) * mid.sin() * dt;
            th = (i + 1) as f64 * dt * PI / 2.0;
        }
        let p = Pose::exp(&TangentVector::from_slice(&[PI / 2.0, PI / 2.0, 0.0])).unwrap();
        assert!((p.translation().x - x).abs() < 1e-9);
        assert!((p.translation().y - y).abs() < 1e-9);
        assert!((p.translation().x - 1.0).abs() < 1e-9);
        assert!((p.translation().y - 1.0).abs() < 1e-9);
    }

    #[test]
    fn exp_log_round_trip_near_pi() {
        let p = Pose::se2(3.0, -1.0, 0.9 * PI);
        let q = Pose::exp(&p.log().unwrap()).unwrap();
        assert!(close(&p, &q, 1e-9));
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        let p3 = Pose::se3(
            UnitQuaternion::from_scaled_axis(axis * 0.9 * PI),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let q3 = Pose::exp(&p3.log().unwrap()).unwrap();
        assert!(close(&p3, &q3, 1e-9));
    }

    #[test]
    fn non_finite_rejected() {
        assert_eq!(
            Pose::exp(&TangentVector::from_slice(&[f64::NAN, 0.0, 0.0])),
            Err(ManifoldError::NonFinite)
        );
        assert_eq!(Pose::se2(f64::INFINITY, 0.0, 0.0).log(), Err(ManifoldError::NonFinite));
    }

    #[test]
    fn split_interpolate_cases() {
        let a = Pose::se2(1.0, 2.0, 0.0);
        let b = Pose::se2(3.0, -2.0, PI / 2.0);
        assert!(close(&Pose::split_interpolate(&a, &a, 0.5).unwrap(), &a, 1e-12));
        assert!(close(&Pose::split_interpolate(&a, &b, 0.0).unwrap(), &a, 1e-12));
        assert!(close(&Pose::split_interpolate(&a, &b, 1.0).unwrap(), &b, 1e-12));
        let mid = Pose::split_interpolate(&a, &b, 0.5).unwrap();
        assert!((mid.rotation().yaw() - PI / 4.0).abs() < 1e-12);
        assert!((mid.translation() - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn split_interpolate_errors() {
        let a = Pose::se2(0.0, 0.0, 0.0);
        let b = Pose::se2(0.0, 0.0, PI);
        assert_eq!(Pose::split_interpolate(&a, &b, 0.5), Err(ManifoldError::Antipodal));
        assert_eq!(
            Pose::split_interpolate(&a, &a, 1.5),
            Err(ManifoldError::InvalidFraction(1.5))
        );
    }

    #[test]
    fn chordal_vec_layout() {
        let v = Pose::identity(2).chordal_vec();
        assert_eq!(v.as_slice(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let v = Pose::se2(2.0, 3.0, PI / 2.0).chordal_vec();
        let expect = [0.0, 1.0, -1.0, 0.0, 2.0, 3.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(Pose::identity(3).chordal_vec().len(), 12);
    }

    #[test]
    fn spatial_quaternion_stays_unit() {
        let mut p = Pose::identity(3);
        let step = Pose::exp(&TangentVector::from_slice(&[0.01, 0.02, -0.03, 0.1, 0.0, 0.0])).unwrap();
        for _ in 0..10_000 {
            p = p.compose(&step);
        }
        if let Rotation::Spatial(q) = p.rotation() {
            assert!((q.into_inner().norm() - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn associativity_se3(a in arb_se3(), b in arb_se3(), c in arb_se3()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(close(&l, &r, 1e-9));
        }

        #[test]
        fn associativity_se2(a in arb_se2(), b in arb_se2(), c in arb_se2()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(close(&l, &r, 1e-9));
        }

        #[test]
        fn inverse_law(a in arb_se3()) {
            prop_assert!(close(&a.compose(&a.inverse()), &Pose::identity(3), 1e-9));
            prop_assert!(close(&a.inverse().compose(&a), &Pose::identity(3), 1e-9));
        }

        #[test]
        fn log_exp_round_trip_se3(
            w in prop::array::uniform3(-1.0..1.0f64),
            rho in prop::array::uniform3(-5.0..5.0f64),
            scale in 0.0..0.9f64,
        ) {
            let w = Vector3::from(w);
            let w = if w.norm() > 1e-9 { w.normalize() * scale * PI } else { w };
            let v = TangentVector::from_slice(&[w.x, w.y, w.z, rho[0], rho[1], rho[2]]);
            let back = Pose::exp(&v).unwrap().log().unwrap();
            prop_assert!((back.0 - v.0).norm() < 1e-8);
        }

        #[test]
        fn log_exp_round_trip_se2(th in -0.9..0.9f64, x in -5.0..5.0f64, y in -5.0..5.0f64) {
            let v = TangentVector::from_slice(&[th * PI, x, y]);
            let back = Pose::exp(&v).unwrap().log().unwrap();
            prop_assert!((back.0 - v.0).norm() < 1e-8);
        }

        #[test]
        fn midpoint_symmetry(a in arb_se3(), b in arb_se3()) {
            let rel = a.rotation().inverse().compose(b.rotation()).angle();
            prop_assume!(rel < PI - 1e-3);
            let m1 = Pose::split_interpolate(&a, &b, 0.5).unwrap();
            let m2 = Pose::split_interpolate(&b, &a, 0.5).unwrap();
            prop_assert!(close(&m1, &m2, 1e-9));
        }

        #[test]
        fn chordal_injective(a in arb_se3(), b in arb_se3()) {
            let d = a.local(&b).unwrap().norm();
            prop_assume!(d > 1e-6);
            prop_assert!((a.chordal_vec() - b.chordal_vec()).norm() > 1e-7);
        }
    }
}
