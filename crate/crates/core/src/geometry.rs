//! Camera poses, camera-to-world matrices and rotation interpolation.
//!
//! Conventions: right-handed world, cameras look down their local −z axis,
//! local +y is up and local +x is right. A [`CameraPose`] stores the view
//! direction (`look_at`) as a unit vector, not a target point.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance under which `look_at` and `up` are treated as parallel.
pub const PARALLEL_EPS: f64 = 1e-6;
/// Beyond this quaternion dot product SLERP falls back to normalized lerp.
const SLERP_LINEAR_THRESHOLD: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate camera frame: {0}")]
    DegenerateFrame(String),
    #[error("malformed camera-to-world matrix: {0}")]
    MalformedMatrix(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self - other).norm()
    }

    /// Unit vector in the same direction, or `None` for a zero or non-finite vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n > 0.0 && n.is_finite() {
            Some(self / n)
        } else {
            None
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn lerp(self, other: Vec3, t: f64) -> Vec3 {
        self + (other - self) * t
    }

    pub fn component_min(self, other: Vec3) -> Vec3 {
        Vec3::new(self.x.min(other.x), self.y.min(other.y), self.z.min(other.z))
    }

    pub fn component_max(self, other: Vec3) -> Vec3 {
        Vec3::new(self.x.max(other.x), self.y.max(other.y), self.z.max(other.z))
    }

    /// Angle between two directions in radians, in `[0, π]`.
    pub fn angle_to(self, other: Vec3) -> f64 {
        // atan2 form stays accurate near 0 and π where acos loses precision
        self.cross(other).norm().atan2(self.dot(other))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, rhs: Vec3) {
        *self = *self + rhs;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A rotation stored as a unit quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes the raw components. Returns `None` for a zero quaternion.
    pub fn new_normalize(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n > 0.0 && n.is_finite() {
            Some(Self { w: w / n, x: x / n, y: y / n, z: z / n })
        } else {
            None
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Option<Self> {
        let axis = axis.normalized()?;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new_normalize(c, axis.x * s, axis.y * s, axis.z * s)
    }

    /// Builds the rotation whose matrix has the given orthonormal columns.
    pub fn from_basis(c0: Vec3, c1: Vec3, c2: Vec3) -> Option<Self> {
        let (m00, m01, m02) = (c0.x, c1.x, c2.x);
        let (m10, m11, m12) = (c0.y, c1.y, c2.y);
        let (m20, m21, m22) = (c0.z, c1.z, c2.z);
        let trace = m00 + m11 + m22;
        // Shepperd's method: branch on the largest diagonal term
        let (w, x, y, z) = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            (0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s)
        } else if m00 > m11 && m00 > m22 {
            let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
            ((m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s)
        } else if m11 > m22 {
            let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
            ((m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s)
        } else {
            let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
            ((m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s)
        };
        Self::new_normalize(w, x, y, z)
    }

    pub fn components(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &UnitQuaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn negated(&self) -> UnitQuaternion {
        UnitQuaternion { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn conjugate(&self) -> UnitQuaternion {
        UnitQuaternion { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    /// Angle of the shortest rotation taking `self` to `other`, in `[0, π]`.
    pub fn angle_to(&self, other: &UnitQuaternion) -> f64 {
        (self.conjugate() * *other).angle()
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, r: UnitQuaternion) -> UnitQuaternion {
        let (a, b) = (self, r);
        UnitQuaternion {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }
}

/// Spherical linear interpolation along the shorter arc.
///
/// The angle from `q1` to the result is `t` times the angle from `q1` to `q2`.
/// Nearly identical rotations fall back to normalized linear interpolation.
pub fn quat_slerp(q1: UnitQuaternion, q2: UnitQuaternion, t: f64) -> UnitQuaternion {
    let mut q2 = q2;
    let mut dot = q1.dot(&q2);
    if dot < 0.0 {
        q2 = q2.negated();
        dot = -dot;
    }
    let (s1, s2) = if dot > SLERP_LINEAR_THRESHOLD {
        (1.0 - t, t)
    } else {
        let theta = dot.min(1.0).acos();
        let sin_theta = theta.sin();
        (((1.0 - t) * theta).sin() / sin_theta, (t * theta).sin() / sin_theta)
    };
    UnitQuaternion::new_normalize(
        s1 * q1.w + s2 * q2.w,
        s1 * q1.x + s2 * q2.x,
        s1 * q1.y + s2 * q2.y,
        s1 * q1.z + s2 * q2.z,
    )
    // the weights are non-negative and q1·q2 ≥ 0, so the sum never vanishes
    .unwrap_or(q1)
}

/// A camera position plus an orthonormal viewing frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose")]
pub struct CameraPose {
    origin: Vec3,
    look_at: Vec3,
    up: Vec3,
}

#[derive(Deserialize)]
struct RawPose {
    origin: Vec3,
    look_at: Vec3,
    up: Vec3,
}

impl TryFrom<RawPose> for CameraPose {
    type Error = GeometryError;
    fn try_from(raw: RawPose) -> Result<Self, Self::Error> {
        generate_pose(raw.origin, raw.look_at, raw.up)
    }
}

/// Builds a valid pose: normalizes `look_at` and re-orthogonalizes `up` against it.
pub fn generate_pose(origin: Vec3, look_at: Vec3, up: Vec3) -> Result<CameraPose, GeometryError> {
    if !origin.is_finite() {
        return Err(GeometryError::DegenerateFrame(format!("non-finite origin {origin}")));
    }
    let look = look_at
        .normalized()
        .ok_or_else(|| GeometryError::DegenerateFrame(format!("look_at {look_at} has no direction")))?;
    let up_dir = up.normalized().ok_or_else(|| GeometryError::DegenerateFrame(format!("up {up} has no direction")))?;
    let along = up_dir.dot(look);
    if along.abs() > 1.0 - PARALLEL_EPS {
        return Err(GeometryError::DegenerateFrame(format!("look_at {look_at} is parallel to up {up}")));
    }
    let up_ortho = (up_dir - look * along)
        .normalized()
        .ok_or_else(|| GeometryError::DegenerateFrame("up collapsed during orthogonalization".into()))?;
    Ok(CameraPose { origin, look_at: look, up: up_ortho })
}

impl CameraPose {
    pub fn new(origin: Vec3, look_at: Vec3, up: Vec3) -> Result<Self, GeometryError> {
        generate_pose(origin, look_at, up)
    }

    /// Pose at `origin` aimed at the point `target`.
    pub fn looking_at_point(origin: Vec3, target: Vec3, up: Vec3) -> Result<Self, GeometryError> {
        generate_pose(origin, target - origin, up)
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn look_at(&self) -> Vec3 {
        self.look_at
    }

    pub fn up(&self) -> Vec3 {
        self.up
    }

    pub fn right(&self) -> Vec3 {
        self.look_at.cross(self.up)
    }

    pub fn with_origin(&self, origin: Vec3) -> CameraPose {
        CameraPose { origin, ..*self }
    }

    /// Rotation taking camera axes (right, up, back) to world axes.
    pub fn orientation(&self) -> UnitQuaternion {
        UnitQuaternion::from_basis(self.right(), self.up, -self.look_at).expect("a valid pose frame is orthonormal")
    }

    /// Rebuilds a pose from an orientation quaternion.
    pub fn from_orientation(origin: Vec3, q: UnitQuaternion) -> Result<Self, GeometryError> {
        generate_pose(origin, q.rotate(-Vec3::Z), q.rotate(Vec3::Y))
    }
}

/// Row-major 4×4 camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraToWorld {
    rows: [[f64; 4]; 4],
}

impl CameraToWorld {
    pub const IDENTITY: CameraToWorld = CameraToWorld {
        rows: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
    };

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Self {
        Self { rows }
    }

    /// Reads 16 row-major values.
    pub fn from_row_major(values: &[f64]) -> Result<Self, GeometryError> {
        if values.len() != 16 {
            return Err(GeometryError::MalformedMatrix(format!("expected 16 values, got {}", values.len())));
        }
        let mut rows = [[0.0; 4]; 4];
        for (i, v) in values.iter().enumerate() {
            rows[i / 4][i % 4] = *v;
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[[f64; 4]; 4] {
        &self.rows
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn column(&self, c: usize) -> Vec3 {
        Vec3::new(self.rows[0][c], self.rows[1][c], self.rows[2][c])
    }

    pub fn translation(&self) -> Vec3 {
        self.column(3)
    }
}

/// Columns are `(right, up, −look_at, origin)`.
pub fn pose_to_matrix(pose: &CameraPose) -> CameraToWorld {
    let cols = [pose.right(), pose.up, -pose.look_at, pose.origin];
    let mut rows = [[0.0; 4]; 4];
    for (c, v) in cols.iter().enumerate() {
        rows[0][c] = v.x;
        rows[1][c] = v.y;
        rows[2][c] = v.z;
    }
    rows[3] = [0.0, 0.0, 0.0, 1.0];
    CameraToWorld { rows }
}

/// Decomposes a camera-to-world matrix, re-orthonormalizing its rotation block.
pub fn matrix_to_pose(m: &CameraToWorld) -> Result<CameraPose, GeometryError> {
    let rows = m.rows();
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GeometryError::MalformedMatrix("non-finite entry".into()));
    }
    let expected = [0.0, 0.0, 0.0, 1.0];
    if rows[3].iter().zip(expected).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(GeometryError::MalformedMatrix(format!("last row is {:?}, expected [0, 0, 0, 1]", rows[3])));
    }
    let (c0, c1, c2) = (m.column(0), m.column(1), m.column(2));
    let det = c0.dot(c1.cross(c2));
    if det.abs() < 1e-6 {
        return Err(GeometryError::MalformedMatrix(format!("rotation block is singular (det = {det:e})")));
    }
    generate_pose(m.translation(), -c2, c1)
        .map_err(|e| GeometryError::MalformedMatrix(format!("rotation block has no valid frame: {e}")))
}

/// Pose at fraction `t` between `p1` and `p2`: SLERP on orientation, lerp on origin.
pub fn interpolate_pose(p1: &CameraPose, p2: &CameraPose, t: f64) -> Result<CameraPose, GeometryError> {
    let q = quat_slerp(p1.orientation(), p2.orientation(), t);
    CameraPose::from_orientation(p1.origin.lerp(p2.origin, t), q)
}

/// `steps` interior poses at `t = i / (steps + 1)`, endpoints excluded.
pub fn slerp_poses(p1: &CameraPose, p2: &CameraPose, steps: usize) -> Result<Vec<CameraPose>, GeometryError> {
    let q1 = p1.orientation();
    let q2 = p2.orientation();
    (1..=steps)
        .map(|i| {
            let t = i as f64 / (steps + 1) as f64;
            CameraPose::from_orientation(p1.origin.lerp(p2.origin, t), quat_slerp(q1, q2, t))
        })
        .collect()
}
