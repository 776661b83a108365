//! Rigid transforms, quaternion kinematics and plane algebra.
//!
//! Conventions used throughout the crate:
//! - quaternions are Hamilton, rotations act as `x' = R(q) x`;
//! - `Omega` matrices act on quaternions stored scalar-last `(x, y, z, w)`;
//! - a pose `T = (R, p)` maps points of its child frame into its parent frame,
//!   `x_parent = R x_child + p`;
//! - pose perturbations are 6-vectors `[dp, dtheta]` applied as
//!   `p <- p + dp`, `R <- R Exp(dtheta)`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4, Vector6};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// `[v]x`, so that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// The 4x4 rate matrix `[[-[w]x, w], [-w^T, 0]]`.
///
/// For a Hamilton quaternion stored as `(x, y, z, w)` and a body-frame rate,
/// `q_dot = 0.5 * omega_matrix(w) * q` is the same as `0.5 * q ⊗ (w, 0)`.
pub fn omega_matrix(omega: &Vec3) -> Matrix4<f64> {
    let s = skew(omega);
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-s));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(omega);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-omega.transpose()));
    m
}

/// Small-angle rotation increment `normalize([0.5 dt w; 1])`.
pub fn quaternion_increment(omega: &Vec3, dt: f64) -> Quat {
    let half = 0.5 * dt * omega;
    UnitQuaternion::from_quaternion(Quaternion::new(1.0, half.x, half.y, half.z))
}

/// One propagation step `q <- q ⊗ dq(w, dt)`, evaluated through the rate
/// matrix and renormalised.
pub fn propagate_quaternion(q: &Quat, omega: &Vec3, dt: f64) -> Quat {
    // q ⊗ [0.5 dt w; 1] = q + 0.5 dt Omega(w) q
    let coords: Vector4<f64> = q.as_ref().coords;
    let next = coords + 0.5 * dt * omega_matrix(omega) * coords;
    UnitQuaternion::from_quaternion(Quaternion::from(next))
}

pub fn so3_exp(phi: &Vec3) -> Quat {
    UnitQuaternion::from_scaled_axis(*phi)
}

pub fn so3_log(q: &Quat) -> Vec3 {
    q.scaled_axis()
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let s = skew(phi);
    if theta < 1e-5 {
        return Mat3::identity() - 0.5 * s + s * s / 6.0;
    }
    let t2 = theta * theta;
    Mat3::identity() - (1.0 - theta.cos()) / t2 * s + (theta - theta.sin()) / (t2 * theta) * s * s
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let s = skew(phi);
    if theta < 1e-5 {
        return Mat3::identity() + 0.5 * s + s * s / 12.0;
    }
    let t2 = theta * theta;
    let coeff = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + 0.5 * s + coeff * s * s
}

/// Rigid transform `x_parent = R x_child + p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Quat::identity(), translation: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Quat::identity(), translation: t }
    }

    pub fn from_rotation(rotation: Quat) -> Self {
        Self { rotation, translation: Vec3::zeros() }
    }

    /// Builds a pose from Z-Y-X Euler angles (yaw about z, then pitch about
    /// the new y, then roll about the new x).
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64, translation: Vec3) -> Self {
        Self { rotation: quat_from_euler_zyx(yaw, pitch, roll), translation }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose { rotation: inv, translation: -(inv * self.translation) }
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// `self^-1 * other`: `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    /// Tangent update `p + dp`, `R Exp(dtheta)` with `delta = [dp, dtheta]`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let dp = delta.fixed_rows::<3>(0).into_owned();
        let dth = delta.fixed_rows::<3>(3).into_owned();
        Pose { rotation: renormalize(self.rotation * so3_exp(&dth)), translation: self.translation + dp }
    }

    /// Inverse of [`Pose::retract`]: the delta taking `self` to `other`.
    pub fn local(&self, other: &Pose) -> Vector6<f64> {
        let dp = other.translation - self.translation;
        let dth = so3_log(&(self.rotation.inverse() * other.rotation));
        Vector6::new(dp.x, dp.y, dp.z, dth.x, dth.y, dth.z)
    }

    /// Slerp on rotation and lerp on translation between `a` (s = 0) and
    /// `b` (s = 1).
    pub fn interpolate(a: &Pose, b: &Pose, s: f64) -> Pose {
        Pose { rotation: a.rotation.slerp(&b.rotation, s), translation: a.translation.lerp(&b.translation, s) }
    }

    /// (yaw, pitch, roll) in the Z-Y-X convention.
    pub fn euler_zyx(&self) -> (f64, f64, f64) {
        euler_zyx(&self.rotation)
    }

    pub fn rotation_angle(&self) -> f64 {
        quat_angle(&self.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite()) && self.rotation.as_ref().coords.iter().all(|v| v.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn quat_from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Quat {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch)
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), roll)
}

/// (yaw, pitch, roll) of `q` in the Z-Y-X convention.
pub fn euler_zyx(q: &Quat) -> (f64, f64, f64) {
    let r = q.to_rotation_matrix().into_inner();
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    (yaw, pitch, roll)
}

/// Rotation angle of `q` in `[0, pi]`, accurate near the identity.
pub fn quat_angle(q: &Quat) -> f64 {
    2.0 * q.imag().norm().atan2(q.scalar().abs())
}

/// Angle of `a^-1 b`.
pub fn quat_angle_between(a: &Quat, b: &Quat) -> f64 {
    quat_angle(&(a.inverse() * b))
}

/// Angle between two vectors, accurate near 0 and pi.
pub fn vector_angle(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

fn renormalize(q: Quat) -> Quat {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Plane `x^T n - d = 0` in Hesse normal form with `|n| = 1` and `d >= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HessePlane {
    normal: Vec3,
    distance: f64,
}

impl HessePlane {
    /// Normalises `normal` (scaling `distance` accordingly) and flips the
    /// sign so that `distance >= 0`. Returns `None` for a zero normal.
    pub fn new(normal: Vec3, distance: f64) -> Option<Self> {
        let norm = normal.norm();
        if !(norm > 1e-12) || !distance.is_finite() {
            return None;
        }
        let (mut n, mut d) = (normal / norm, distance / norm);
        if d < 0.0 {
            n = -n;
            d = -d;
        }
        Some(Self { normal: n, distance: d })
    }

    /// Plane with unit normal `normal` through `point`.
    pub fn from_point_normal(point: &Vec3, normal: &Vec3) -> Option<Self> {
        let norm = normal.norm();
        if !(norm > 1e-12) {
            return None;
        }
        let n = normal / norm;
        Self::new(n, point.dot(&n))
    }

    pub fn normal(&self) -> &Vec3 {
        &self.normal
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    /// Signed point-plane distance `x^T n - d`.
    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        x.dot(&self.normal) - self.distance
    }

    /// Closest-point vector `n d`.
    pub fn closest_point(&self) -> Vec3 {
        self.normal * self.distance
    }

    /// Angle between the two normals, in `[0, pi]`.
    pub fn normal_angle(&self, other: &HessePlane) -> f64 {
        vector_angle(&self.normal, &other.normal)
    }
}

impl fmt::Display for HessePlane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n=({:.4}, {:.4}, {:.4}) d={:.4}", self.normal.x, self.normal.y, self.normal.z, self.distance)
    }
}

/// Re-expresses `plane` (given in frame A) in frame B, where `t` maps
/// A-coordinates to B-coordinates (`x_B = R x_A + p`).
///
/// From `x_A^T n - d = 0` and `x_A = R^T (x_B - p)`:
/// `n' = R n`, `d' = d + p^T (R n)`.
pub fn transform_plane(t: &Pose, plane: &HessePlane) -> HessePlane {
    let n = t.rotation * plane.normal;
    let d = plane.distance + t.translation.dot(&n);
    // n is unit up to rounding; new() renormalises and canonicalises.
    HessePlane::new(n, d).expect("rotated unit normal is never zero")
}
