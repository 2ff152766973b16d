//! Rotation and pose algebra, pinhole intrinsics, and angular metrics.
//!
//! Conventions used everywhere in this crate:
//! - Poses are world-to-camera: `x_cam = R * x_world + t`.
//! - Rotations are stored as unit quaternions on the canonical hemisphere
//!   (`w >= 0`), so equal rotations have equal components.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Angle below which exp/log switch to their series expansions.
const SMALL_ANGLE: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("direction angle of a (near-)zero vector is undefined")]
    ZeroVector,
}

/// A 3D rotation stored as a unit quaternion `(w, x, y, z)` with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3 {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Builds a rotation from quaternion components, renormalizing and
    /// mapping onto the canonical hemisphere.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }.normalized()
    }

    /// Builds a rotation from an orthonormal matrix (Shepperd's method).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Self { w, x, y, z }.normalized()
    }

    /// Exponential map: rotation by angle `|omega|` about `omega / |omega|`.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta = omega.norm();
        let half = 0.5 * theta;
        let (w, k) = if theta < SMALL_ANGLE {
            // cos(t/2) ~ 1 - t^2/8, sin(t/2)/t ~ 1/2 - t^2/48
            (1.0 - half * half / 2.0, 0.5 - theta * theta / 48.0)
        } else {
            (half.cos(), half.sin() / theta)
        };
        Self { w, x: k * omega.x, y: k * omega.y, z: k * omega.z }.normalized()
    }

    /// Logarithm map; the returned vector has norm in `[0, pi]`.
    pub fn log(&self) -> Vector3<f64> {
        // w >= 0 by canonicalization, so theta = 2 atan2(s, w) <= pi.
        let s = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        let scale = if s < SMALL_ANGLE {
            // theta/s -> 2/w as s -> 0
            2.0 / self.w * (1.0 - s * s / (3.0 * self.w * self.w))
        } else {
            2.0 * s.atan2(self.w) / s
        };
        Vector3::new(self.x, self.y, self.z) * scale
    }

    pub fn inverse(&self) -> Self {
        // Conjugate; w stays on the canonical hemisphere.
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let s = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * s.atan2(self.w)
    }

    /// Geodesic distance to `other`: the angle of `self * other^T`.
    pub fn angle_to(&self, other: &Rotation3) -> f64 {
        (*self * other.inverse()).angle()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        // q v q^-1 via the twice-cross-product form.
        let u = Vector3::new(self.x, self.y, self.z);
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Quaternion components `(w, x, y, z)` on the canonical hemisphere.
    pub fn wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// True if the two rotations agree component-wise within `tol`.
    pub fn approx_eq(&self, other: &Rotation3, tol: f64) -> bool {
        (self.w - other.w).abs() <= tol
            && (self.x - other.x).abs() <= tol
            && (self.y - other.y).abs() <= tol
            && (self.z - other.z).abs() <= tol
    }

    fn normalized(self) -> Self {
        let n = (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        // Skip the division when already unit to machine precision: identity
        // compositions then preserve operands bit-for-bit.
        let mut q = if (n - 1.0).abs() < 1e-13 {
            self
        } else {
            Self { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
        };
        // Canonical hemisphere; ties at w == 0 resolved by the first
        // nonzero imaginary component so serialization is deterministic.
        let negate = if q.w < 0.0 {
            true
        } else if q.w == 0.0 {
            q.x < 0.0 || (q.x == 0.0 && (q.y < 0.0 || (q.y == 0.0 && q.z < 0.0)))
        } else {
            false
        };
        if negate {
            q = Self { w: -q.w, x: -q.x, y: -q.y, z: -q.z };
        }
        q
    }
}

impl std::ops::Mul for Rotation3 {
    type Output = Rotation3;

    /// Composition: `(a * b).rotate(v) == a.rotate(b.rotate(v))`.
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Rotation3::from_quaternion(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )
    }
}

/// A world-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation3, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds the pose with rotation `r` whose camera center is `c`
    /// (`t = -R c`).
    pub fn from_rotation_center(rotation: Rotation3, center: &Vector3<f64>) -> Self {
        let translation = -rotation.rotate(center);
        Self { rotation, translation }
    }

    /// Camera center in world coordinates: `C = -R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -self.rotation.inverse().rotate(&self.translation)
    }

    /// Maps a world point into the camera frame.
    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(world) + self.translation
    }
}

/// Relative pose from `p1`'s camera frame to `p2`'s:
/// `R = R2 R1^T`, `t = t2 - R2 R1^T t1`.
pub fn relative_pose(p1: &Pose, p2: &Pose) -> (Rotation3, Vector3<f64>) {
    let r = p2.rotation * p1.rotation.inverse();
    let t = p2.translation - r.rotate(&p1.translation);
    (r, t)
}

/// Applies a relative pose on top of `base`: the result maps world points
/// through `base` and then through `(rel_r, rel_t)`.
pub fn compose_relative(base: &Pose, rel_r: &Rotation3, rel_t: &Vector3<f64>) -> Pose {
    Pose {
        rotation: *rel_r * base.rotation,
        translation: rel_r.rotate(&base.translation) + rel_t,
    }
}

/// Angle between two directions, in `[0, pi]`.
pub fn direction_angle(u: &Vector3<f64>, v: &Vector3<f64>) -> Result<f64, GeomError> {
    let (nu, nv) = (u.norm(), v.norm());
    if nu < 1e-12 || nv < 1e-12 {
        return Err(GeomError::ZeroVector);
    }
    Ok(u.cross(v).norm().atan2(u.dot(v)))
}

/// Pinhole intrinsics; pixels are assumed pre-undistorted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Self { fx, fy, cx, cy }
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, px: &[f64; 2]) -> [f64; 2] {
        [(px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy]
    }

    /// Normalized image coordinates to pixel.
    pub fn denormalize(&self, n: &[f64; 2]) -> [f64; 2] {
        [n[0] * self.fx + self.cx, n[1] * self.fy + self.cy]
    }

    pub fn max_focal(&self) -> f64 {
        self.fx.max(self.fy)
    }
}
