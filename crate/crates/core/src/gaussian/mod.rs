//! 3D Gaussian primitives, the deformation field, the pose corrector and the
//! differentiable CPU splatting renderer.

mod deform;
mod posenet;
mod render;
pub mod script;

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

pub use deform::{positional_encoding, DeformationConfig, DeformationField, DeformationTrace, Offsets};
pub use posenet::{KeyframeTrajectory, PoseNet, PoseTrace};
pub use render::{render, render_backward, Contribution, GaussianGrads, RenderOutput, RenderSettings};

/// One anisotropic Gaussian with degree-0 color.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mu: Vector3<f64>,
    /// Natural log of the per-axis standard deviations.
    pub log_scale: Vector3<f64>,
    /// Rotation quaternion `(w, x, y, z)`; normalized before use.
    pub rotation: Vector4<f64>,
    /// Opacity before the sigmoid.
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Inverse of [`sigmoid`], clamping to keep the result finite.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

impl Gaussian {
    pub fn isotropic(mu: Vector3<f64>, scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            mu,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        let q = self.rotation;
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// `Σ = R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = rotation_matrix(&self.rotation);
        let m = r * Matrix3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(self.log_scale.iter()).chain(self.rotation.iter()).all(|v| v.is_finite())
            && !self.opacity_logit.is_nan()
            && self.color.iter().all(|c| c.is_finite())
    }
}

/// Rotation matrix of the normalized quaternion `q = (w, x, y, z)`.
pub(crate) fn rotation_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
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

/// Gradient with respect to the raw quaternion, given `dL/dR` of its rotation matrix.
pub(crate) fn rotation_matrix_backward(q: &Vector4<f64>, grad_r: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let qn = q / n;
    let (w, x, y, z) = (qn[0], qn[1], qn[2], qn[3]);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let g_unit = Vector4::new(
        grad_r.component_mul(&dw).sum(),
        grad_r.component_mul(&dx).sum(),
        grad_r.component_mul(&dy).sum(),
        grad_r.component_mul(&dz).sum(),
    );
    // through q / |q|
    (g_unit - qn * qn.dot(&g_unit)) / n
}
