//! 6-DoF pose algebra.
//!
//! Poses are stored as a translation plus intrinsic Z-Y-X Euler angles
//! (roll, pitch, yaw). All composition happens on rotation matrices through
//! [`Transform`]; Euler angles are only produced at the boundary, which keeps
//! long chains free of Euler nonlinearity.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pitch values closer than this to ±π/2 are rejected.
pub const GIMBAL_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite pose component")]
    NonFinite,
    #[error("pitch {pitch} is within the gimbal-lock band")]
    GimbalLock { pitch: f64 },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Wraps an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    if !a.is_finite() {
        return a;
    }
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Orthonormal 3×3 rotation matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotMat(pub Matrix3<f64>);

impl RotMat {
    pub fn identity() -> Self {
        RotMat(Matrix3::identity())
    }

    /// Builds `Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_euler(r: &Vector3<f64>) -> Self {
        let (sr, cr) = r.x.sin_cos();
        let (sp, cp) = r.y.sin_cos();
        let (sy, cy) = r.z.sin_cos();
        RotMat(Matrix3::new(
            cy * cp,
            cy * sp * sr - sy * cr,
            cy * sp * cr + sy * sr,
            sy * cp,
            sy * sp * sr + cy * cr,
            sy * sp * cr - cy * sr,
            -sp,
            cp * sr,
            cp * cr,
        ))
    }

    /// Inverse of [`RotMat::from_euler`]; angles come back normalized.
    pub fn to_euler(&self) -> Result<Vector3<f64>> {
        let m = &self.0;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        if pitch.abs() > PI / 2.0 - GIMBAL_MARGIN {
            return Err(GeometryError::GimbalLock { pitch });
        }
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        Ok(Vector3::new(
            normalize_angle(roll),
            normalize_angle(pitch),
            normalize_angle(yaw),
        ))
    }

    pub fn transpose(&self) -> Self {
        RotMat(self.0.transpose())
    }

    /// Geodesic rotation angle in [0, π].
    pub fn angle(&self) -> f64 {
        // atan2 form stays accurate near 0, where acos of the trace does not
        let m = &self.0;
        let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() / 2.0;
        let c = (m.trace() - 1.0) / 2.0;
        s.atan2(c)
    }

    /// Rotation vector (axis · angle).
    pub fn log(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.0).scaled_axis()
    }

    /// Quaternion as `[qx, qy, qz, qw]` with `qw >= 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    /// Accepts a possibly unnormalized `[qx, qy, qz, qw]`.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
        RotMat(*uq.to_rotation_matrix().matrix())
    }
}

/// Rigid transform in matrix form; the internal workhorse for composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rot: RotMat,
    pub t: Vector3<f64>,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            rot: RotMat::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn new(rot: RotMat, t: Vector3<f64>) -> Self {
        Transform { rot, t }
    }

    /// `self ⊕ other`.
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            rot: RotMat(self.rot.0 * other.rot.0),
            t: self.t + self.rot.0 * other.t,
        }
    }

    pub fn inverse(&self) -> Transform {
        let rt = self.rot.0.transpose();
        Transform {
            rot: RotMat(rt),
            t: -(rt * self.t),
        }
    }

    /// `other` expressed in the frame of `self`.
    pub fn relative(&self, other: &Transform) -> Transform {
        self.inverse().compose(other)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.0 * p + self.t
    }

    /// Adjoint for tangent vectors ordered (translation, rotation):
    /// `T · Exp(ξ) = Exp(Ad(T) ξ) · T`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rot.0;
        let tx = skew(&self.t);
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(tx * r));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A 6-DoF pose: translation in meters, Euler angles (roll, pitch, yaw) in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6 {
    pub t: Vector3<f64>,
    pub r: Vector3<f64>,
}

impl Default for Pose6 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose6 {
    pub fn new(t: Vector3<f64>, r: Vector3<f64>) -> Self {
        Pose6 { t, r }
    }

    pub fn identity() -> Self {
        Pose6 {
            t: Vector3::zeros(),
            r: Vector3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose6::new(Vector3::new(x, y, z), Vector3::zeros())
    }

    /// `[tx, ty, tz, roll, pitch, yaw]`.
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Pose6 {
            t: Vector3::new(v[0], v[1], v[2]),
            r: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.t.x, self.t.y, self.t.z, self.r.x, self.r.y, self.r.z)
    }

    pub fn is_finite(&self) -> bool {
        self.t.iter().chain(self.r.iter()).all(|v| v.is_finite())
    }

    /// Same pose with every Euler angle wrapped into (−π, π].
    pub fn normalized(&self) -> Self {
        Pose6 {
            t: self.t,
            r: self.r.map(normalize_angle),
        }
    }

    pub fn rotation(&self) -> RotMat {
        RotMat::from_euler(&self.r)
    }

    pub fn to_transform(&self) -> Transform {
        Transform::new(self.rotation(), self.t)
    }

    pub fn from_transform(tf: &Transform) -> Result<Self> {
        if !tf.t.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Pose6 {
            t: tf.t,
            r: tf.rot.to_euler()?,
        })
    }

    fn checked(&self) -> Result<Transform> {
        if self.is_finite() {
            Ok(self.to_transform())
        } else {
            Err(GeometryError::NonFinite)
        }
    }

    /// `self ⊕ other`: `other` is applied in the frame of `self`.
    pub fn compose(&self, other: &Pose6) -> Result<Pose6> {
        let a = self.checked()?;
        let b = other.checked()?;
        Pose6::from_transform(&a.compose(&b))
    }

    pub fn inverse(&self) -> Result<Pose6> {
        Pose6::from_transform(&self.checked()?.inverse())
    }

    /// `inverse(self) ⊕ other`, i.e. `other` expressed in the frame of `self`.
    pub fn relative(&self, other: &Pose6) -> Result<Pose6> {
        let a = self.checked()?;
        let b = other.checked()?;
        Pose6::from_transform(&a.relative(&b))
    }

    /// Geodesic angle of the rotation part.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation().angle()
    }
}

/// Converts Euler angles to a matrix and back.
pub fn euler_matrix_roundtrip(r: &Vector3<f64>) -> Result<Vector3<f64>> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let pitch = normalize_angle(r.y);
    // a pitch outside [-π/2, π/2] is a different Euler triple for the same matrix
    if pitch.abs() > PI / 2.0 - GIMBAL_MARGIN {
        return Err(GeometryError::GimbalLock { pitch });
    }
    RotMat::from_euler(r).to_euler()
}

/// Wrapped difference `a − b` on every angle component.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pose_strategy() -> impl Strategy<Value = Pose6> {
        (
            prop::array::uniform3(-50.0f64..50.0),
            -PI..PI,
            -1.3f64..1.3,
            -PI..PI,
        )
            .prop_map(|(t, roll, pitch, yaw)| {
                Pose6::new(Vector3::from(t), Vector3::new(roll, pitch, yaw))
            })
    }

    fn assert_pose_eq(a: &Pose6, b: &Pose6, tol: f64) {
        for k in 0..3 {
            assert_abs_diff_eq!(a.t[k], b.t[k], epsilon = tol);
            assert_abs_diff_eq!(angle_diff(a.r[k], b.r[k]), 0.0, epsilon = tol);
        }
    }

    #[test]
    fn identity_is_neutral() {
        let p = Pose6::new(Vector3::new(1.0, -2.0, 0.5), Vector3::new(0.1, -0.2, 2.5));
        assert_pose_eq(&Pose6::identity().compose(&p).unwrap(), &p, 1e-14);
        assert_pose_eq(&p.compose(&Pose6::identity()).unwrap(), &p, 1e-14);
    }

    #[test]
    fn pure_translations_add() {
        let a = Pose6::from_translation(1.0, 0.0, 0.0);
        let b = Pose6::from_translation(0.0, 2.0, 0.0);
        assert_pose_eq(&a.compose(&b).unwrap(), &Pose6::from_translation(1.0, 2.0, 0.0), 0.0);
    }

    #[test]
    fn yaw_quarter_turn_matches_matrix_oracle() {
        let a = Pose6::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI / 2.0));
        let b = Pose6::from_translation(1.0, 0.0, 0.0);
        let c = a.compose(&b).unwrap();
        // independent oracle: explicit Rz(π/2) · (1, 0, 0)
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expected = rz * Vector3::new(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(c.t, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(c.t, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(c.r.z, PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn from_euler_matches_axis_products() {
        let r = Vector3::new(0.3, -0.4, 1.1);
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), r.x);
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), r.y);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), r.z);
        let oracle = (rz * ry * rx).into_inner();
        assert_abs_diff_eq!(RotMat::from_euler(&r).0, oracle, epsilon = 1e-14);
    }

    #[test]
    fn non_finite_is_rejected() {
        let bad = Pose6::from_translation(f64::NAN, 0.0, 0.0);
        assert_eq!(
            bad.compose(&Pose6::identity()),
            Err(GeometryError::NonFinite)
        );
        assert_eq!(
            Pose6::identity().compose(&bad),
            Err(GeometryError::NonFinite)
        );
    }

    #[test]
    fn inverse_trivial_cases() {
        assert_pose_eq(&Pose6::identity().inverse().unwrap(), &Pose6::identity(), 0.0);
        let p = Pose6::from_translation(3.0, 0.0, 0.0);
        assert_pose_eq(&p.inverse().unwrap(), &Pose6::from_translation(-3.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn relative_trivial_cases() {
        let p = Pose6::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.2, 0.1, -2.0));
        assert_pose_eq(&p.relative(&p).unwrap(), &Pose6::identity(), 1e-12);
        assert_pose_eq(&Pose6::identity().relative(&p).unwrap(), &p, 1e-12);
    }

    #[test]
    fn euler_roundtrip_cases() {
        assert_eq!(
            euler_matrix_roundtrip(&Vector3::zeros()).unwrap(),
            Vector3::zeros()
        );
        let r = Vector3::new(0.1, 0.2, 0.3);
        assert_abs_diff_eq!(euler_matrix_roundtrip(&r).unwrap(), r, epsilon = 1e-9);
        assert!(matches!(
            euler_matrix_roundtrip(&Vector3::new(0.0, PI / 2.0, 0.0)),
            Err(GeometryError::GimbalLock { .. })
        ));
        assert!(matches!(
            RotMat::from_euler(&Vector3::new(0.3, -PI / 2.0, 0.2)).to_euler(),
            Err(GeometryError::GimbalLock { .. })
        ));
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_abs_diff_eq!(normalize_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(normalize_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(normalize_angle(0.5 + 4.0 * PI), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn quaternion_roundtrip() {
        let r = RotMat::from_euler(&Vector3::new(0.4, -0.7, 2.9));
        let q = r.to_quaternion();
        assert!(q[3] >= 0.0);
        assert_abs_diff_eq!(RotMat::from_quaternion(q).0, r.0, epsilon = 1e-12);
    }

    #[test]
    fn adjoint_moves_perturbation_across() {
        let t = Pose6::new(Vector3::new(1.0, -2.0, 0.5), Vector3::new(0.2, 0.3, 1.0)).to_transform();
        let xi = Vector6::new(1e-4, -2e-4, 5e-5, 2e-4, -1e-4, 3e-4);
        let exp = |v: &Vector6<f64>| {
            let rot = Rotation3::new(Vector3::new(v[3], v[4], v[5])).into_inner();
            Transform::new(RotMat(rot), Vector3::new(v[0], v[1], v[2]))
        };
        let lhs = t.compose(&exp(&xi));
        let rhs = exp(&(t.adjoint() * xi)).compose(&t);
        // agreement to second order in |ξ|
        assert_abs_diff_eq!(lhs.t, rhs.t, epsilon = 1e-6);
        assert_abs_diff_eq!(lhs.rot.0, rhs.rot.0, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(p in pose_strategy()) {
            let id = p.compose(&p.inverse().unwrap()).unwrap();
            assert_pose_eq(&id, &Pose6::identity(), 1e-12);
        }

        #[test]
        fn composition_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let lhs = a.compose(&b).unwrap().compose(&c);
            let rhs = b.compose(&c).and_then(|bc| a.compose(&bc));
            if let (Ok(l), Ok(r)) = (lhs, rhs) {
                assert_pose_eq(&l, &r, 1e-10);
            }
        }

        #[test]
        fn relative_roundtrip(a in pose_strategy(), b in pose_strategy()) {
            let rel = a.relative(&b).unwrap();
            assert_pose_eq(&a.compose(&rel).unwrap(), &b, 1e-10);
        }

        #[test]
        fn normalize_is_idempotent(x in -100.0f64..100.0) {
            let once = normalize_angle(x);
            prop_assert!(once > -PI && once <= PI);
            prop_assert_eq!(normalize_angle(once), once);
        }

        #[test]
        fn euler_roundtrip_outside_gimbal_band(r in (-PI..PI, -1.55f64..1.55, -PI..PI)) {
            let v = Vector3::new(r.0, r.1, r.2);
            let back = euler_matrix_roundtrip(&v).unwrap();
            for k in 0..3 {
                prop_assert!(angle_diff(back[k], v[k]).abs() < 1e-9);
            }
        }
    }
}
