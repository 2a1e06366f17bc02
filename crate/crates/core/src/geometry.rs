//! Pinhole camera, rigid world-to-camera poses and instantaneous rigid velocities.
//!
//! Pixel centers sit at integer coordinates: pixel `(i, j)` is the point
//! `u = i`, `v = j` on the image plane. A camera-frame point `(X, Y, Z)` maps to
//! `u = fx X / Z + cx`, `v = fy Y / Z + cy`.

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {}x{} sensor",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Pixel coordinates to focal-normalized image coordinates.
    #[inline]
    pub fn normalize(&self, pixel: Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    #[inline]
    pub fn denormalize(&self, normalized: Vector2<f64>) -> Vector2<f64> {
        Vector2::new(normalized.x * self.fx + self.cx, normalized.y * self.fy + self.cy)
    }

    pub fn contains(&self, pixel: Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= (self.width - 1) as f64 && pixel.y <= (self.height - 1) as f64
    }
}

/// Rigid world-to-camera transform: `p_cam = R p_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose from a `[w, x, y, z]` quaternion, normalizing it.
    pub fn from_wxyz(q: [f64; 4], translation: [f64; 3]) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(Quaternion::new(q[0], q[1], q[2], q[3])),
            translation: Vector3::from(translation),
        }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Pose of a camera centered at `center` whose camera-to-world rotation is `orientation`.
    pub fn from_camera_center(orientation: UnitQuaternion<f64>, center: Vector3<f64>) -> Self {
        let rotation = orientation.inverse();
        Self { rotation, translation: -(rotation * center) }
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose { rotation, translation: -(rotation * self.translation) }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Relative motion of camera-frame coordinates produced by moving the camera with
    /// `vel` for `dt`: rotation `exp(-w dt)`, translation `-v dt`.
    ///
    /// Composing it on the left of a pose advances that pose along the twist, and
    /// [`relative_velocity`] recovers `vel` from the pair exactly.
    pub fn from_velocity(vel: &RigidVelocity, dt: f64) -> Pose {
        Pose {
            rotation: UnitQuaternion::from_scaled_axis(-vel.angular * dt),
            translation: -vel.linear * dt,
        }
    }
}

/// Instantaneous camera velocity expressed in the camera frame.
///
/// Static points move in the camera frame as `dP/dt = -v - w × P`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidVelocity {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl RigidVelocity {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { linear: self.linear * s, angular: self.angular * s }
    }

    pub fn add(&self, other: &RigidVelocity) -> Self {
        Self { linear: self.linear + other.linear, angular: self.angular + other.angular }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.linear.x, self.linear.y, self.linear.z, self.angular.x, self.angular.y, self.angular.z]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self { linear: Vector3::new(v[0], v[1], v[2]), angular: Vector3::new(v[3], v[4], v[5]) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// Camera-frame depth `Z`.
    pub depth: f64,
}

impl Projection {
    pub fn normalized(&self, intr: &CameraIntrinsics) -> Vector2<f64> {
        intr.normalize(self.pixel)
    }
}

pub fn project(point: &Vector3<f64>, pose: &Pose, intr: &CameraIntrinsics) -> Result<Projection> {
    let pc = pose.transform_point(point);
    if pc.z <= 0.0 || !pc.z.is_finite() {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    Ok(Projection {
        pixel: Vector2::new(intr.fx * pc.x / pc.z + intr.cx, intr.fy * pc.y / pc.z + intr.cy),
        depth: pc.z,
    })
}

pub fn unproject(pixel: Vector2<f64>, depth: f64, pose: &Pose, intr: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if depth <= 0.0 || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    let n = intr.normalize(pixel);
    let pc = Vector3::new(n.x * depth, n.y * depth, depth);
    Ok(pose.rotation.inverse() * (pc - pose.translation))
}

/// Constant camera velocity carrying `pose_t0` to `pose_t1` over `dt`.
///
/// The angular part comes from the logarithm of the relative rotation, the linear
/// part from the relative translation expressed in the camera frame.
pub fn relative_velocity(pose_t0: &Pose, pose_t1: &Pose, dt: f64) -> Result<RigidVelocity> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::InvalidInterval(dt));
    }
    if pose_t0 == pose_t1 {
        // quaternion round-off would otherwise leave ~1e-17 residue
        return Ok(RigidVelocity::zero());
    }
    let rotation = pose_t1.rotation * pose_t0.rotation.inverse();
    let translation = pose_t1.translation - rotation * pose_t0.translation;
    Ok(RigidVelocity { linear: -translation / dt, angular: -rotation.scaled_axis() / dt })
}

/// Constant-twist interpolation between two poses; `alpha = 0` gives `p0`, `alpha = 1` gives `p1`.
pub fn interpolate_pose(p0: &Pose, p1: &Pose, alpha: f64) -> Pose {
    // unit interval keeps the twist finite even for coincident poses
    let vel = relative_velocity(p0, p1, 1.0).expect("unit interval is valid");
    Pose::from_velocity(&vel, alpha).compose(p0)
}
