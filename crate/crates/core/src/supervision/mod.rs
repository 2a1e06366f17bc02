//! Photometric, event and decomposed-motion losses, and the two-phase training loop.

mod data;
mod model;
mod train;

use nalgebra::{Matrix2x3, SMatrix, Vector2, Vector3};

use crate::association::{Binding, BindingTable};
use crate::contrast::FlowField;
use crate::error::Result;
use crate::events::INTENSITY_FLOOR;
use crate::gaussian::{DeformationField, Gaussian};
use crate::geometry::{project, CameraIntrinsics, Pose, RigidVelocity};
use crate::raster::{decode_gamma, decode_gamma_derivative, ColorImage, Plane};

pub use data::{record_scene, Recording};
pub use model::{gaussian_params, perturbed, set_gaussian_params, DynamicModel, ModelGrads, GAUSSIAN_PARAMS};
pub use train::{
    heldout_psnr, motion_objective, scene_flow_epe, train, FlowProvider, Frame, LogRow, MotionContext, MotionTerms,
    PredictorFlow, TrainConfig, TrainReport, TrainingData,
};

/// Loss weighting: constant `γ1` and the annealed `γ2(iter) = 1 − exp(−iter / τ)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub gamma1: f64,
    pub gamma2_tau: f64,
    pub warmup: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma1: 1.0, gamma2_tau: 4000.0, warmup: 3500 }
    }
}

impl LossWeights {
    pub fn gamma2(&self, iteration: usize) -> f64 {
        -(-(iteration as f64) / self.gamma2_tau).exp_m1()
    }

    pub fn in_warmup(&self, iteration: usize) -> bool {
        iteration < self.warmup
    }

    pub fn total_loss(&self, l_rgb: f64, l_event: f64, l_motion: f64, iteration: usize) -> f64 {
        l_rgb + self.gamma1 * l_event + self.gamma2(iteration) * l_motion
    }
}

/// Sign with `sign(0) = 0`, the subgradient used for every L1 term.
#[inline]
pub(crate) fn l1_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference over all channels, with its gradient on `prediction`.
pub fn l1_image_loss(prediction: &ColorImage, target: &ColorImage) -> (f64, ColorImage) {
    let n = (prediction.data.len() * 3) as f64;
    let mut grad = ColorImage::zeros(prediction.width, prediction.height);
    let mut total = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&prediction.data).zip(&target.data) {
        for k in 0..3 {
            let d = p[k] - t[k];
            total += d.abs();
            g[k] = l1_sign(d) / n;
        }
    }
    (total / n, grad)
}

/// Image-velocity Jacobian at `pixel`: pixel flow per unit `(v, w)` for inverse depth `inv_depth`.
pub fn ego_jacobian(intr: &CameraIntrinsics, pixel: Vector2<f64>, inv_depth: f64) -> SMatrix<f64, 2, 6> {
    let n = intr.normalize(pixel);
    let (x, y, r) = (n.x, n.y, inv_depth);
    let mut a = SMatrix::<f64, 2, 6>::from_row_slice(&[
        -r, 0.0, x * r, x * y, -(1.0 + x * x), y, //
        0.0, -r, y * r, 1.0 + y * y, -x * y, -x,
    ]);
    a.row_mut(0).scale_mut(intr.fx);
    a.row_mut(1).scale_mut(intr.fy);
    a
}

/// Pixel velocity of a static point seen at `pixel` under camera velocity `vel`.
pub fn ego_flow_at(intr: &CameraIntrinsics, pixel: Vector2<f64>, inv_depth: f64, vel: &RigidVelocity) -> Vector2<f64> {
    ego_jacobian(intr, pixel, inv_depth) * SMatrix::<f64, 6, 1>::from(vel.as_array())
}

/// Dense ego-motion flow; pixels with non-finite or non-positive inverse depth are NaN.
pub fn ego_flow(intr: &CameraIntrinsics, inverse_depth: &Plane, vel: &RigidVelocity) -> FlowField {
    let mut out = FlowField::zeros(inverse_depth.width, inverse_depth.height);
    for y in 0..inverse_depth.height {
        for x in 0..inverse_depth.width {
            let r = inverse_depth.get(x, y);
            out.data[y * out.width + x] = if r.is_finite() && r > 0.0 {
                let f = ego_flow_at(intr, Vector2::new(x as f64, y as f64), r, vel);
                [f.x, f.y]
            } else {
                [f64::NAN; 2]
            };
        }
    }
    out
}

/// Projection of a world point with its 2×3 Jacobian, or `None` behind the camera.
pub(crate) fn project_with_jacobian(p: &Vector3<f64>, pose: &Pose, intr: &CameraIntrinsics) -> Option<(Vector2<f64>, Matrix2x3<f64>)> {
    let r = pose.rotation.to_rotation_matrix().into_inner();
    let c = pose.transform_point(p);
    if !(c.z > 0.0) {
        return None;
    }
    let iz = 1.0 / c.z;
    let pixel = Vector2::new(intr.fx * c.x * iz + intr.cx, intr.fy * c.y * iz + intr.cy);
    let jc = Matrix2x3::new(intr.fx * iz, 0.0, -intr.fx * c.x * iz * iz, 0.0, intr.fy * iz, -intr.fy * c.y * iz * iz);
    Some((pixel, jc * r))
}

/// Projected displacement of one canonical Gaussian between `t0` and `t1` under a fixed pose.
pub fn gaussian_scene_flow(
    gaussian: &Gaussian,
    field: &DeformationField,
    t0: f64,
    t1: f64,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<Vector2<f64>> {
    let at = |t: f64| {
        let (off, _) = field.forward(std::slice::from_ref(&gaussian.mu), t);
        project(&(gaussian.mu + off[0].dx), pose, intr).map(|p| p.pixel)
    };
    Ok(at(t1)? - at(t0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Integrate forward from the left frame.
    Left,
    /// Integrate backward from the right frame.
    Right,
}

/// Left branch when `t_e` is at or before the midpoint.
pub fn branch_for(t_e: f64, t0: f64, t2: f64) -> Branch {
    if t_e <= 0.5 * (t0 + t2) {
        Branch::Left
    } else {
        Branch::Right
    }
}

/// Linear-intensity pseudo label at `t_e` from the anchor frame and the integrated polarity.
///
/// `polarity` holds `Σ p C`, integrated from the anchor toward `t_e`.
pub fn pseudo_label(anchor: &ColorImage, polarity: &Plane, branch: Branch, gamma: f64) -> ColorImage {
    let mut out = ColorImage::zeros(anchor.width, anchor.height);
    for ((o, a), p) in out.data.iter_mut().zip(&anchor.data).zip(&polarity.data) {
        let factor = match branch {
            Branch::Left => p.exp(),
            Branch::Right => (-p).exp(),
        };
        for k in 0..3 {
            o[k] = decode_gamma(a[k], gamma).max(INTENSITY_FLOOR) * factor;
        }
    }
    out
}

/// Mean L1 between the linearized render and the pseudo label, with the gradient on the
/// display-space render.
pub fn event_loss(render: &ColorImage, label: &ColorImage, gamma: f64) -> (f64, ColorImage) {
    let n = (render.data.len() * 3) as f64;
    let mut grad = ColorImage::zeros(render.width, render.height);
    let mut total = 0.0;
    for ((g, r), l) in grad.data.iter_mut().zip(&render.data).zip(&label.data) {
        for k in 0..3 {
            let lin = decode_gamma(r[k], gamma);
            let (value, slope) =
                if lin > INTENSITY_FLOOR { (lin, decode_gamma_derivative(r[k], gamma)) } else { (INTENSITY_FLOOR, 0.0) };
            let d = value - l[k];
            total += d.abs();
            g[k] = l1_sign(d) * slope / n;
        }
    }
    (total / n, grad)
}

/// Binding-weighted predicted flow and pixel centroid of one Gaussian's bindings.
pub fn weighted_flow(bindings: &[Binding], flow: &FlowField) -> (Vector2<f64>, Vector2<f64>) {
    bindings.iter().fold((Vector2::zeros(), Vector2::zeros()), |(f, c), b| {
        let v = flow.get(b.pixel[0] as usize, b.pixel[1] as usize);
        (f + b.weight * Vector2::new(v[0], v[1]), c + b.weight * Vector2::new(b.pixel[0] as f64, b.pixel[1] as f64))
    })
}

/// Mean L1 norm of `Σ w f(pixel) − (F_ego + F_gs)` over Gaussians that have bindings and
/// valid ego and scene flow.
pub fn motion_loss(
    table: &BindingTable,
    flow: &FlowField,
    ego: &[Option<Vector2<f64>>],
    scene: &[Option<Vector2<f64>>],
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..table.len() {
        let bindings = table.get(i);
        let (Some(e), Some(s)) = (ego[i], scene[i]) else { continue };
        if bindings.is_empty() {
            continue;
        }
        let (pred, _) = weighted_flow(bindings, flow);
        total += (pred - (e + s)).abs().sum();
        count += 1;
    }
    if count == 0 {
        log::warn!("motion loss has no bound Gaussians");
        return 0.0;
    }
    total / count as f64
}

#[cfg(test)]
mod tests;
