//! Trainable state: canonical Gaussians, deformation field and camera correction network.

use nalgebra::{Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::script::CameraKey;
use crate::gaussian::{DeformationConfig, DeformationField, Gaussian, GaussianGrads, KeyframeTrajectory, PoseNet};
use crate::geometry::Pose;

/// Scalars per Gaussian in the flat layout: `mu 3, log_scale 3, rotation 4, opacity 1, color 3`.
pub const GAUSSIAN_PARAMS: usize = 14;

pub fn gaussian_params(gaussians: &[Gaussian]) -> Vec<f64> {
    let mut out = Vec::with_capacity(gaussians.len() * GAUSSIAN_PARAMS);
    for g in gaussians {
        out.extend_from_slice(g.mu.as_slice());
        out.extend_from_slice(g.log_scale.as_slice());
        out.extend_from_slice(g.rotation.as_slice());
        out.push(g.opacity_logit);
        out.extend_from_slice(&g.color);
    }
    out
}

pub fn set_gaussian_params(gaussians: &mut [Gaussian], params: &[f64]) {
    for (g, p) in gaussians.iter_mut().zip(params.chunks_exact(GAUSSIAN_PARAMS)) {
        g.mu = Vector3::new(p[0], p[1], p[2]);
        g.log_scale = Vector3::new(p[3], p[4], p[5]);
        g.rotation = Vector4::new(p[6], p[7], p[8], p[9]);
        g.opacity_logit = p[10];
        g.color = [p[11], p[12], p[13]];
    }
}

/// Gradient buffers matching the three optimizer groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub gaussians: Vec<f64>,
    pub deformation: Vec<f64>,
    pub posenet: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros(model: &DynamicModel) -> Self {
        Self {
            gaussians: vec![0.0; model.gaussians.len() * GAUSSIAN_PARAMS],
            deformation: vec![0.0; model.deformation.param_count()],
            posenet: vec![0.0; model.posenet.param_count()],
        }
    }

    pub fn add_mu(&mut self, i: usize, mu: &Vector3<f64>) {
        let g = &mut self.gaussians[i * GAUSSIAN_PARAMS..];
        for k in 0..3 {
            g[k] += mu[k];
        }
    }

    pub fn add_render(&mut self, grads: &GaussianGrads) {
        for (i, g) in self.gaussians.chunks_exact_mut(GAUSSIAN_PARAMS).enumerate() {
            let src = grads.mu[i].iter().chain(grads.log_scale[i].iter()).chain(grads.rotation[i].iter());
            for (d, s) in g.iter_mut().zip(src) {
                *d += s;
            }
            g[10] += grads.opacity_logit[i];
            for k in 0..3 {
                g[11 + k] += grads.color[i][k];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gaussians.iter().chain(&self.deformation).chain(&self.posenet).all(|v| v.is_finite())
    }
}

/// Canonical scene, deformation field, camera correction and the keyframe trajectory it corrects.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicModel {
    pub gaussians: Vec<Gaussian>,
    pub deformation: DeformationField,
    pub posenet: PoseNet,
    pub trajectory: KeyframeTrajectory,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    gaussians: Vec<Gaussian>,
    deformation: DeformationConfig,
    deformation_params: Vec<f64>,
    posenet_time_freqs: usize,
    posenet_hidden: usize,
    posenet_params: Vec<f64>,
    trajectory: Vec<CameraKey>,
}

impl DynamicModel {
    pub fn new(
        gaussians: Vec<Gaussian>,
        trajectory: KeyframeTrajectory,
        deformation: DeformationConfig,
        posenet_hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            gaussians,
            deformation: DeformationField::new(deformation, seed)?,
            posenet: PoseNet::new(PoseNet::DEFAULT_TIME_FREQS, posenet_hidden, seed.wrapping_add(1)),
            trajectory,
        })
    }

    pub fn pose_at(&self, t: f64) -> Result<Pose> {
        self.posenet.pose_at(&self.trajectory, t)
    }

    /// Gaussians deformed to time `t`.
    pub fn gaussians_at(&self, t: f64) -> Vec<Gaussian> {
        self.deformation.deform(&self.gaussians, t).0
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            gaussians: self.gaussians.clone(),
            deformation: self.deformation.config().clone(),
            deformation_params: self.deformation.params().to_vec(),
            posenet_time_freqs: self.posenet.time_freqs(),
            posenet_hidden: self.posenet.hidden_width(),
            posenet_params: self.posenet.params().to_vec(),
            trajectory: self.trajectory.times().iter().zip(self.trajectory.poses()).map(|(t, p)| CameraKey::from_pose(*t, p)).collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let trajectory =
            KeyframeTrajectory::new(file.trajectory.iter().map(|c| c.t).collect(), file.trajectory.iter().map(CameraKey::pose).collect())?;
        Ok(Self {
            gaussians: file.gaussians,
            deformation: DeformationField::from_params(file.deformation, file.deformation_params)?,
            posenet: PoseNet::from_params(file.posenet_time_freqs, file.posenet_hidden, file.posenet_params)?,
            trajectory,
        })
    }
}

/// Copy of `gaussians` with Gaussian noise on positions (`position_sigma`) and colors (`color_sigma`).
pub fn perturbed(gaussians: &[Gaussian], position_sigma: f64, color_sigma: f64, seed: u64) -> Vec<Gaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = Normal::new(0.0, position_sigma.max(0.0)).expect("finite sigma");
    let col = Normal::new(0.0, color_sigma.max(0.0)).expect("finite sigma");
    gaussians
        .iter()
        .map(|g| {
            let mut g = *g;
            g.mu += Vector3::from_fn(|_, _| pos.sample(&mut rng));
            for c in &mut g.color {
                *c = (*c + col.sample(&mut rng)).clamp(0.0, 1.0);
            }
            g
        })
        .collect()
}
