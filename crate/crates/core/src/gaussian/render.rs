//! Front-to-back alpha compositing of projected Gaussians and its reverse pass.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use super::{rotation_matrix, rotation_matrix_backward, Gaussian};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::raster::{ColorImage, Plane};

const TILE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Gaussians closer than this camera-frame depth are dropped.
    pub near: f64,
    /// Added to the diagonal of every projected covariance, in px².
    pub covariance_floor: f64,
    /// Squared Mahalanobis radius beyond which a Gaussian does not touch a pixel.
    pub cutoff: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    /// Keep per-pixel contributor lists for [`render_backward`].
    pub keep_records: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            near: 0.01,
            covariance_floor: 0.3,
            cutoff: 9.0,
            min_transmittance: 1e-4,
            keep_records: true,
        }
    }
}

/// One Gaussian's share of a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub id: u32,
    pub alpha: f64,
    /// Transmittance in front of this Gaussian.
    pub transmittance: f64,
}

#[derive(Debug, Clone)]
struct Splat {
    id: usize,
    depth: f64,
    pc: Vector3<f64>,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    jac: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
    opacity: f64,
    bbox: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ColorImage,
    /// Alpha-weighted depth normalized by accumulated alpha; NaN where nothing renders.
    pub depth: Plane,
    /// Accumulated alpha `Σ α_i T_i`.
    pub alpha: Plane,
    pub final_transmittance: Plane,
    record_offsets: Vec<usize>,
    records: Vec<Contribution>,
    splats: Vec<Option<Splat>>,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    background: [f64; 3],
    has_records: bool,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Ordered contributors of pixel `(x, y)`; empty when records were not kept.
    pub fn contributors(&self, x: usize, y: usize) -> &[Contribution] {
        if !self.has_records {
            return &[];
        }
        let i = y * self.color.width + x;
        &self.records[self.record_offsets[i]..self.record_offsets[i + 1]]
    }

    /// `1 / depth` where depth is valid.
    pub fn inverse_depth(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.depth.get(x, y);
        (d.is_finite() && d > 0.0).then(|| 1.0 / d)
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }
}

fn project_splat(id: usize, g: &Gaussian, pose: &Pose, intr: &CameraIntrinsics, s: &RenderSettings) -> Option<Splat> {
    let w = pose.rotation.to_rotation_matrix().into_inner();
    let pc = w * g.mu + pose.translation;
    if !(pc.z > s.near) {
        return None;
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let jac = Matrix2x3::new(intr.fx / z, 0.0, -intr.fx * x / (z * z), 0.0, intr.fy / z, -intr.fy * y / (z * z));
    let rot = rotation_matrix(&g.rotation);
    let scale = g.scale();
    let m = rot * Matrix3::from_diagonal(&scale);
    let cov3 = m * m.transpose();
    let cov_cam = w * cov3 * w.transpose();
    let cov2 = jac * cov_cam * jac.transpose() + Matrix2::identity() * s.covariance_floor;
    let det = cov2.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = cov2.try_inverse()?;
    let mean = Vector2::new(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy);
    let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = s.cutoff.sqrt() * lambda_max.sqrt();
    let (wd, ht) = (intr.width as f64, intr.height as f64);
    let (x0, x1) = ((mean.x - radius).ceil().max(0.0), (mean.x + radius).floor().min(wd - 1.0));
    let (y0, y1) = ((mean.y - radius).ceil().max(0.0), (mean.y + radius).floor().min(ht - 1.0));
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some(Splat {
        id,
        depth: z,
        pc,
        mean,
        conic,
        jac,
        cov_cam,
        rot,
        scale,
        opacity: g.opacity(),
        bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    })
}

/// Renders color, depth and accumulated alpha; pixel centers sit at integer coordinates.
pub fn render(gaussians: &[Gaussian], pose: &Pose, intr: &CameraIntrinsics, settings: &RenderSettings) -> RenderOutput {
    let (w, h) = (intr.width, intr.height);
    let splats: Vec<Option<Splat>> =
        gaussians.iter().enumerate().map(|(i, g)| project_splat(i, g, pose, intr, settings)).collect();
    let mut order: Vec<&Splat> = splats.iter().flatten().collect();
    order.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));

    let (tx_n, ty_n) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let mut bins: Vec<Vec<&Splat>> = vec![Vec::new(); tx_n * ty_n];
    for s in &order {
        let [x0, x1, y0, y1] = s.bbox;
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                bins[ty * tx_n + tx].push(s);
            }
        }
    }

    let mut color = ColorImage::zeros(w, h);
    let mut depth = Plane::filled(w, h, f64::NAN);
    let mut alpha = Plane::zeros(w, h);
    let mut final_t = Plane::filled(w, h, 1.0);
    let mut record_offsets = Vec::with_capacity(w * h + 1);
    let mut records = Vec::new();
    for y in 0..h {
        for x in 0..w {
            record_offsets.push(records.len());
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let (mut z_acc, mut a_acc) = (0.0, 0.0);
            let p = Vector2::new(x as f64, y as f64);
            for s in &bins[(y / TILE) * tx_n + x / TILE] {
                let [x0, x1, y0, y1] = s.bbox;
                if x < x0 || x > x1 || y < y0 || y > y1 {
                    continue;
                }
                let d = p - s.mean;
                let maha = d.dot(&(s.conic * d));
                if maha > settings.cutoff {
                    continue;
                }
                let a = s.opacity * (-0.5 * maha).exp();
                if !(a > 0.0) {
                    continue;
                }
                let weight = a * t;
                let gc = &gaussians[s.id].color;
                for k in 0..3 {
                    c[k] += gc[k] * weight;
                }
                z_acc += s.depth * weight;
                a_acc += weight;
                if settings.keep_records {
                    records.push(Contribution { id: s.id as u32, alpha: a, transmittance: t });
                }
                t *= 1.0 - a;
                if t < settings.min_transmittance {
                    break;
                }
            }
            for k in 0..3 {
                c[k] += t * settings.background[k];
            }
            color.set(x, y, c);
            alpha.set(x, y, a_acc);
            final_t.set(x, y, t);
            if a_acc > 0.0 {
                depth.set(x, y, z_acc / a_acc);
            }
        }
    }
    record_offsets.push(records.len());
    RenderOutput {
        color,
        depth,
        alpha,
        final_transmittance: final_t,
        record_offsets,
        records,
        splats,
        pose: *pose,
        intrinsics: *intr,
        background: settings.background,
        has_records: settings.keep_records,
    }
}

/// Parameter gradients of every Gaussian, indexed like the rendered list.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub mu: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn add_assign(&mut self, other: &GaussianGrads) {
        for i in 0..self.len() {
            self.mu[i] += other.mu[i];
            self.log_scale[i] += other.log_scale[i];
            self.rotation[i] += other.rotation[i];
            self.opacity_logit[i] += other.opacity_logit[i];
            for k in 0..3 {
                self.color[i][k] += other.color[i][k];
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for i in 0..self.len() {
            self.mu[i] *= s;
            self.log_scale[i] *= s;
            self.rotation[i] *= s;
            self.opacity_logit[i] *= s;
            for k in 0..3 {
                self.color[i][k] *= s;
            }
        }
    }
}

/// Reverse pass of [`render`] for a loss with gradient `grad_color` on the color image.
///
/// Depth and alpha outputs are treated as constants.
pub fn render_backward(gaussians: &[Gaussian], output: &RenderOutput, grad_color: &ColorImage) -> Result<GaussianGrads> {
    if !output.has_records {
        return Err(Error::MissingRecords);
    }
    if !grad_color.same_shape(&output.color) {
        return Err(Error::Shape("color gradient does not match the rendered image".into()));
    }
    let n = gaussians.len();
    let mut grads = GaussianGrads::zeros(n);
    let mut g_mean = vec![Vector2::zeros(); n];
    let mut g_conic = vec![Matrix2::zeros(); n];
    let (w, h) = (output.width(), output.height());
    for y in 0..h {
        for x in 0..w {
            let gc = grad_color.get(x, y);
            if gc == [0.0; 3] {
                continue;
            }
            let p = Vector2::new(x as f64, y as f64);
            let mut behind = output.background;
            for rec in output.contributors(x, y).iter().rev() {
                let id = rec.id as usize;
                let s = output.splats[id].as_ref().expect("recorded splat was projected");
                let c = gaussians[id].color;
                let weight = rec.alpha * rec.transmittance;
                let mut g_alpha = 0.0;
                for k in 0..3 {
                    grads.color[id][k] += gc[k] * weight;
                    g_alpha += gc[k] * rec.transmittance * (c[k] - behind[k]);
                }
                for k in 0..3 {
                    behind[k] = rec.alpha * c[k] + (1.0 - rec.alpha) * behind[k];
                }
                grads.opacity_logit[id] += g_alpha * rec.alpha * (1.0 - s.opacity);
                let g_power = g_alpha * rec.alpha;
                let d = p - s.mean;
                g_mean[id] += g_power * (s.conic * d);
                g_conic[id] += g_power * -0.5 * (d * d.transpose());
            }
        }
    }
    let intr = &output.intrinsics;
    let w_rot = output.pose.rotation.to_rotation_matrix().into_inner();
    for (id, splat) in output.splats.iter().enumerate() {
        let Some(s) = splat else { continue };
        if g_mean[id] == Vector2::zeros() && g_conic[id] == Matrix2::zeros() {
            continue;
        }
        let g_cov2 = -(s.conic * g_conic[id] * s.conic);
        let g_cov_cam = s.jac.transpose() * g_cov2 * s.jac;
        let g_jac = 2.0 * g_cov2 * s.jac * s.cov_cam;
        let (x, y, z) = (s.pc.x, s.pc.y, s.pc.z);
        let mut g_pc = s.jac.transpose() * g_mean[id];
        g_pc.x += g_jac[(0, 2)] * (-intr.fx / (z * z));
        g_pc.y += g_jac[(1, 2)] * (-intr.fy / (z * z));
        g_pc.z += g_jac[(0, 0)] * (-intr.fx / (z * z))
            + g_jac[(0, 2)] * (2.0 * intr.fx * x / (z * z * z))
            + g_jac[(1, 1)] * (-intr.fy / (z * z))
            + g_jac[(1, 2)] * (2.0 * intr.fy * y / (z * z * z));
        grads.mu[id] += w_rot.transpose() * g_pc;
        let g_cov3 = w_rot.transpose() * g_cov_cam * w_rot;
        let m = s.rot * Matrix3::from_diagonal(&s.scale);
        let g_m = (g_cov3 + g_cov3.transpose()) * m;
        let mut g_rot = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                g_rot[(i, j)] = g_m[(i, j)] * s.scale[j];
                grads.log_scale[id][j] += g_m[(i, j)] * s.rot[(i, j)] * s.scale[j];
            }
        }
        grads.rotation[id] += rotation_matrix_backward(&gaussians[id].rotation, &g_rot);
    }
    Ok(grads)
}
