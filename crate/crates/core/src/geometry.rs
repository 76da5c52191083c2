//! Camera model, rigid transforms, Euler conversions, and the 2D similarity
//! warp used to frontalize/crop landmark sets and to map predictions back to
//! the original frame.
//!
//! Conventions used throughout the crate:
//!
//! - A [`RigidPose`] maps canonical (object-frame) coordinates into the
//!   camera frame: `x_cam = R * x + t`. The camera looks down +Z. 3D
//!   coordinates are millimetres, 2D coordinates pixels.
//! - Euler angles are the intrinsic yaw-about-Y, pitch-about-X,
//!   roll-about-Z decomposition, `R = Ry(yaw) * Rx(pitch) * Rz(roll)`,
//!   reported in degrees with yaw, roll in `[-180, 180)` and pitch in
//!   `[-90, 90]`. Angle-based metrics depend on this convention.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Errors produced by the geometric primitives.
#[derive(Debug, Error)]
pub enum GeometryError {
    /// A point ended up at or behind the camera plane during projection.
    #[error("point {index} has non-positive camera-frame depth")]
    NonPositiveDepth { index: usize },
    /// The designated eye landmarks coincide; no roll angle can be measured.
    #[error("degenerate landmarks: eye pair coincides")]
    DegenerateLandmarks,
    /// An eye-corner index points outside the landmark set.
    #[error("eye landmark index {index} out of bounds for {len} landmarks")]
    EyeIndexOutOfBounds { index: usize, len: usize },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid similarity warp: {0}")]
    InvalidWarp(String),
    #[error("coordinates must be finite")]
    NonFiniteCoordinates,
}

/// A 6DoF rigid transform: unit quaternion rotation plus translation (mm).
///
/// The stored quaternion is always normalized and sign-canonicalized
/// (scalar part >= 0), so two poses describing the same transform compare
/// bit-equal after the same construction path.
#[derive(Debug, Clone, Copy)]
pub struct RigidPose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonicalize(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    /// Builds a pose from raw quaternion components `(w, x, y, z)` and a
    /// translation. Components already unit within 1e-9 are taken as-is
    /// (keeping serialization round-trips bit-exact); anything else is
    /// renormalized, and a zero or non-finite quaternion is rejected.
    pub fn from_parts(
        w: f64,
        x: f64,
        y: f64,
        z: f64,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(GeometryError::NonFiniteCoordinates);
        }
        let unit = if (norm - 1.0).abs() <= 1e-9 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        Ok(Self::new(unit, translation))
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -(r_inv * self.translation))
    }

    /// Retracts a 6-vector `[ω, δt]` from the local chart at `self`:
    /// the rotation increment is applied on the left,
    /// `(exp(ω̂) R, t + δt)`. This chart is shared by the PnP solver, the
    /// implicit-differentiation backward pass and the softargmin sampler.
    pub fn local_retract(&self, delta: &Vector6<f64>) -> Self {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        Self::new(
            UnitQuaternion::from_scaled_axis(omega) * self.rotation,
            self.translation + dt,
        )
    }

    /// Chart coordinates of `self` at `base`: the `[ω, δt]` with
    /// `self = base.local_retract([ω, δt])`.
    pub fn local_difference(&self, base: &Self) -> Vector6<f64> {
        let rel = canonicalize(self.rotation * base.rotation.inverse());
        let omega = rel.scaled_axis();
        let dt = self.translation - base.translation;
        Vector6::new(omega.x, omega.y, omega.z, dt.x, dt.y, dt.z)
    }
}

fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Intrinsic Y-X-Z Euler angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    /// True when pitch is within 1e-6 degrees of ±90°, where yaw and roll
    /// become indistinguishable and only their difference is observable.
    pub fn near_gimbal_lock(&self) -> bool {
        (self.pitch.abs() - 90.0).abs() < 1e-6
    }
}

/// Pinhole camera intrinsics. `width`/`height` bound the pixel frame.
#[derive(Debug, Clone, Copy)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
    ) -> Result<Self, GeometryError> {
        let all = [fx, fy, cx, cy, width, height];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("non-finite entry".into()));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "frame must be positive, got {width}x{height}"
            )));
        }
        if !(0.0..width).contains(&cx) || !(0.0..height).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} frame"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// An ordered set of finite 2D points (px).
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet2(Vec<Vector2<f64>>);

/// An ordered set of finite 3D points (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet3(Vec<Vector3<f64>>);

impl PointSet2 {
    pub fn new(points: Vec<Vector2<f64>>) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFiniteCoordinates);
        }
        Ok(Self(points))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Vector2<f64>] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vector2<f64>> {
        self.0.iter()
    }
}

impl PointSet3 {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        if points
            .iter()
            .any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(GeometryError::NonFiniteCoordinates);
        }
        Ok(Self(points))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Vector3<f64>] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vector3<f64>> {
        self.0.iter()
    }
}

impl std::ops::Index<usize> for PointSet2 {
    type Output = Vector2<f64>;
    fn index(&self, i: usize) -> &Vector2<f64> {
        &self.0[i]
    }
}

impl std::ops::Index<usize> for PointSet3 {
    type Output = Vector3<f64>;
    fn index(&self, i: usize) -> &Vector3<f64> {
        &self.0[i]
    }
}

/// Perspective projection of a posed point set.
///
/// `u = fx * x/z + cx`, `v = fy * y/z + cy` with `(x, y, z) = R p + t`.
/// Fails with [`GeometryError::NonPositiveDepth`] if any point lands at or
/// behind the camera.
pub fn project(
    points: &PointSet3,
    pose: &RigidPose,
    cam: &CameraIntrinsics,
) -> Result<PointSet2, GeometryError> {
    let mut out = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        let y = pose.transform_point(p);
        if y.z <= 0.0 {
            return Err(GeometryError::NonPositiveDepth { index });
        }
        out.push(Vector2::new(
            cam.fx * y.x / y.z + cam.cx,
            cam.fy * y.y / y.z + cam.cy,
        ));
    }
    PointSet2::new(out)
}

/// Extracts intrinsic Y-X-Z Euler angles (degrees) from a pose's rotation.
///
/// At gimbal lock (|pitch| = 90°) roll is fixed to 0 and the remaining
/// freedom folded into yaw; [`EulerAngles::near_gimbal_lock`] flags the
/// condition.
pub fn pose_to_euler(pose: &RigidPose) -> EulerAngles {
    let r = pose.rotation_matrix();
    // R = Ry(yaw) Rx(pitch) Rz(roll) gives
    //   r12 = -sin(pitch)
    //   r02 = sin(yaw) cos(pitch),   r22 = cos(yaw) cos(pitch)
    //   r10 = cos(pitch) sin(roll),  r11 = cos(pitch) cos(roll)
    let sp = (-r[(1, 2)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    let cp = (1.0 - sp * sp).sqrt();
    let (yaw, roll) = if cp > 1e-9 {
        (
            r[(0, 2)].atan2(r[(2, 2)]),
            r[(1, 0)].atan2(r[(1, 1)]),
        )
    } else if sp > 0.0 {
        // pitch = +90: only yaw - roll is observable
        (r[(0, 1)].atan2(r[(0, 0)]), 0.0)
    } else {
        // pitch = -90: only yaw + roll is observable
        ((-r[(0, 1)]).atan2(r[(0, 0)]), 0.0)
    };
    EulerAngles::new(
        wrap_half_open(yaw.to_degrees()),
        pitch.to_degrees(),
        wrap_half_open(roll.to_degrees()),
    )
}

/// Builds the rotation `Ry(yaw) Rx(pitch) Rz(roll)` as a pose with zero
/// translation. Angles in degrees; any values are accepted, the canonical
/// ranges apply to [`pose_to_euler`] output.
pub fn euler_to_pose(e: &EulerAngles) -> RigidPose {
    let ry = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), e.yaw.to_radians());
    let rx = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), e.pitch.to_radians());
    let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), e.roll.to_radians());
    RigidPose::new(ry * rx * rz, Vector3::zeros())
}

/// Maps an angle in degrees into `[-180, 180)`.
pub fn wrap_half_open(deg: f64) -> f64 {
    let mut a = (deg + 180.0).rem_euclid(360.0) - 180.0;
    if a >= 180.0 {
        a -= 360.0;
    }
    a
}

/// A 2D similarity transform `p ↦ s R(θ) p + t`, the warp type produced by
/// frontalization and inverted when mapping crop-frame predictions back to
/// the original frame.
#[derive(Debug, Clone, Copy)]
pub struct Similarity2D {
    scale: f64,
    angle: f64,
    translation: Vector2<f64>,
}

impl Similarity2D {
    pub fn new(scale: f64, angle: f64, translation: Vector2<f64>) -> Result<Self, GeometryError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::InvalidWarp(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        if !angle.is_finite() || !translation.x.is_finite() || !translation.y.is_finite() {
            return Err(GeometryError::InvalidWarp("non-finite parameter".into()));
        }
        Ok(Self {
            scale,
            angle,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            angle: 0.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn translation(&self) -> Vector2<f64> {
        self.translation
    }

    fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.angle.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.scale * (self.rotation() * p) + self.translation
    }

    /// The usual 2×3 warp-matrix form `[s R | t]`.
    pub fn matrix(&self) -> Matrix2x3<f64> {
        let r = self.rotation() * self.scale;
        Matrix2x3::new(
            r[(0, 0)],
            r[(0, 1)],
            self.translation.x,
            r[(1, 0)],
            r[(1, 1)],
            self.translation.y,
        )
    }

    pub fn inverse(&self) -> Self {
        let inv_scale = 1.0 / self.scale;
        let (s, c) = (-self.angle).sin_cos();
        let r_inv = Matrix2::new(c, -s, s, c);
        Self {
            scale: inv_scale,
            angle: -self.angle,
            translation: -(inv_scale * (r_inv * self.translation)),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            angle: self.angle + other.angle,
            translation: self.scale * (self.rotation() * other.translation) + self.translation,
        }
    }
}

/// Controls [`estimate_frontalize_warp`]: which landmark indices anchor the
/// inter-ocular segment and what fraction of the crop the landmark bounding
/// box should fill.
#[derive(Debug, Clone, Copy)]
pub struct FrontalizeConfig {
    pub left_eye: usize,
    pub right_eye: usize,
    pub fill_fraction: f64,
}

impl Default for FrontalizeConfig {
    fn default() -> Self {
        Self {
            left_eye: 0,
            right_eye: 1,
            fill_fraction: 0.8,
        }
    }
}

/// Estimates the similarity warp that frontalizes a landmark set: the
/// inter-ocular segment becomes horizontal (roll = 0) and the landmark
/// bounding box is centered in a `target_size` × `target_size` crop,
/// filling `fill_fraction` of it along its larger side.
pub fn estimate_frontalize_warp(
    landmarks: &PointSet2,
    target_size: f64,
    cfg: &FrontalizeConfig,
) -> Result<Similarity2D, GeometryError> {
    for index in [cfg.left_eye, cfg.right_eye] {
        if index >= landmarks.len() {
            return Err(GeometryError::EyeIndexOutOfBounds {
                index,
                len: landmarks.len(),
            });
        }
    }
    let left = landmarks[cfg.left_eye];
    let right = landmarks[cfg.right_eye];
    let d = right - left;
    if d.norm() < 1e-12 {
        return Err(GeometryError::DegenerateLandmarks);
    }
    let angle = -d.y.atan2(d.x);

    let (s, c) = angle.sin_cos();
    let rot = Matrix2::new(c, -s, s, c);
    let mut min = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut max = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in landmarks.iter() {
        let q = rot * p;
        min.x = min.x.min(q.x);
        min.y = min.y.min(q.y);
        max.x = max.x.max(q.x);
        max.y = max.y.max(q.y);
    }
    let extent = (max.x - min.x).max(max.y - min.y).max(1e-12);
    let scale = cfg.fill_fraction * target_size / extent;
    let center = 0.5 * (min + max);
    let target_center = Vector2::new(target_size / 2.0, target_size / 2.0);
    let translation = target_center - scale * center;
    Similarity2D::new(scale, angle, translation)
}

/// Applies a warp to every point of a set.
pub fn apply_warp(w: &Similarity2D, pts: &PointSet2) -> PointSet2 {
    PointSet2(pts.iter().map(|p| w.apply(p)).collect())
}

/// Applies the inverse warp, mapping crop-frame points back to the frame
/// the warp was estimated in.
pub fn unwarp(w: &Similarity2D, pts: &PointSet2) -> PointSet2 {
    apply_warp(&w.inverse(), pts)
}
