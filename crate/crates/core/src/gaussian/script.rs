//! Ground-truth scene descriptions: canonical Gaussians, scripted motion groups and a camera path.

use std::ops::Range;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{logit, Gaussian, KeyframeTrajectory};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    /// Constant velocity in scene units per unit normalized time.
    Translate { velocity: [f64; 3] },
    /// `amplitude · sin(2π t / period + phase)`.
    Oscillate { amplitude: [f64; 3], period: f64, phase: f64 },
}

impl Motion {
    pub fn displacement(&self, t: f64) -> Vector3<f64> {
        match self {
            Motion::Static => Vector3::zeros(),
            Motion::Translate { velocity } => Vector3::from(*velocity) * t,
            Motion::Oscillate { amplitude, period, phase } => {
                Vector3::from(*amplitude) * (std::f64::consts::TAU * t / period + phase).sin()
            }
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, Motion::Static)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionGroup {
    pub members: Vec<usize>,
    pub motion: Motion,
}

/// Rigid motion groups over canonical Gaussians; Gaussians in no group stay put.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeformationScript {
    pub groups: Vec<MotionGroup>,
}

impl DeformationScript {
    pub fn validate(&self, count: usize) -> Result<()> {
        let mut seen = vec![false; count];
        for g in &self.groups {
            for &m in &g.members {
                if m >= count {
                    return Err(Error::Config(format!("motion group references Gaussian {m} of {count}")));
                }
                if std::mem::replace(&mut seen[m], true) {
                    return Err(Error::Config(format!("Gaussian {m} belongs to two motion groups")));
                }
            }
            if let Motion::Oscillate { period, .. } = g.motion {
                if !(period > 0.0) {
                    return Err(Error::Config("oscillation period must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Per-Gaussian displacement at time `t`.
    pub fn displacements(&self, count: usize, t: f64) -> Vec<Vector3<f64>> {
        let mut d = vec![Vector3::zeros(); count];
        for g in &self.groups {
            let v = g.motion.displacement(t);
            for &m in &g.members {
                d[m] = v;
            }
        }
        d
    }

    /// Gaussians moved by any non-static group.
    pub fn dynamic_mask(&self, count: usize) -> Vec<bool> {
        let mut mask = vec![false; count];
        for g in self.groups.iter().filter(|g| !g.motion.is_static()) {
            for &m in &g.members {
                mask[m] = true;
            }
        }
        mask
    }

    pub fn apply(&self, canonical: &[Gaussian], t: f64) -> Vec<Gaussian> {
        self.displacements(canonical.len(), t)
            .into_iter()
            .zip(canonical)
            .map(|(d, g)| Gaussian { mu: g.mu + d, ..*g })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraKey {
    /// Normalized time in `[0, 1]`.
    pub t: f64,
    /// World-to-camera rotation `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl CameraKey {
    pub fn pose(&self) -> Pose {
        Pose::from_wxyz(self.rotation, self.translation)
    }

    pub fn from_pose(t: f64, pose: &Pose) -> Self {
        Self { t, rotation: pose.wxyz(), translation: pose.translation.into() }
    }
}

/// Everything needed to render the ground-truth sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub intrinsics: CameraIntrinsics,
    pub background: [f64; 3],
    pub gaussians: Vec<Gaussian>,
    pub script: DeformationScript,
    /// Camera path sampled at increasing normalized times, covering `[0, 1]`.
    pub camera: Vec<CameraKey>,
    /// Sequence length in microseconds; normalized time 1 maps here.
    pub duration_us: u64,
    /// Number of dense frame intervals; frames sit at `i / dense_intervals`.
    pub dense_intervals: usize,
    /// Keep every this-many dense frames as an RGB keyframe.
    pub keyframe_stride: usize,
}

impl SceneDescription {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.script.validate(self.gaussians.len())?;
        if let Some(i) = self.gaussians.iter().position(|g| !g.is_finite()) {
            return Err(Error::Config(format!("Gaussian {i} has non-finite parameters")));
        }
        if self.dense_intervals == 0 || self.keyframe_stride == 0 || self.dense_intervals % self.keyframe_stride != 0 {
            return Err(Error::Config("dense frame count must be a positive multiple of the keyframe stride".into()));
        }
        if self.duration_us < self.dense_intervals as u64 {
            return Err(Error::Config("duration is shorter than one microsecond per frame".into()));
        }
        let covers = self.camera.len() == 1 || (self.camera[0].t <= 0.0 && self.camera.last().is_some_and(|c| c.t >= 1.0));
        if self.camera.is_empty() || !covers {
            return Err(Error::Config("camera path must cover normalized time [0, 1]".into()));
        }
        self.camera_trajectory().map(|_| ())
    }

    /// Camera trajectory; a single key means a static camera.
    pub fn camera_trajectory(&self) -> Result<KeyframeTrajectory> {
        if self.camera.len() == 1 {
            let p = self.camera[0].pose();
            return KeyframeTrajectory::new(vec![0.0, 1.0], vec![p, p]);
        }
        KeyframeTrajectory::new(self.camera.iter().map(|c| c.t).collect(), self.camera.iter().map(CameraKey::pose).collect())
    }

    pub fn dense_times(&self) -> Vec<f64> {
        (0..=self.dense_intervals).map(|i| i as f64 / self.dense_intervals as f64).collect()
    }

    pub fn keyframe_indices(&self) -> Vec<usize> {
        (0..=self.dense_intervals).step_by(self.keyframe_stride).collect()
    }

    pub fn to_us(&self, t: f64) -> u64 {
        (t * self.duration_us as f64).round() as u64
    }

    pub fn to_normalized(&self, t_us: u64) -> f64 {
        t_us as f64 / self.duration_us as f64
    }

    pub fn gaussians_at(&self, t: f64) -> Vec<Gaussian> {
        self.script.apply(&self.gaussians, t)
    }

    /// Copy whose non-static groups oscillate along random directions in the `xy` plane,
    /// with amplitude, period and phase drawn uniformly. Used to build flow-training corpora.
    pub fn with_random_oscillations(&self, seed: u64, amplitude: Range<f64>, period: Range<f64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for g in out.script.groups.iter_mut().filter(|g| !g.motion.is_static()) {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(amplitude.clone());
            g.motion = Motion::Oscillate {
                amplitude: [amp * angle.cos(), amp * angle.sin(), 0.0],
                period: rng.random_range(period.clone()),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            };
        }
        out
    }

    /// Bundled desk-scale scene: textured clusters oscillating in front of a static camera.
    ///
    /// Each object is a `4 × 4` grid of small Gaussians with varied colors, so edges
    /// exist inside objects as well as on their outlines.
    pub fn toy(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intrinsics = CameraIntrinsics { fx: 60.0, fy: 60.0, cx: 31.5, cy: 31.5, width: 64, height: 64 };
        let depth = 2.0;
        let spacing = 0.07;
        let centers = [(-0.55, -0.5), (0.5, -0.45), (-0.45, 0.5), (0.5, 0.5)];
        let directions = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.7071, 0.7071, 0.0], [0.7071, -0.7071, 0.0]];
        let mut gaussians = Vec::new();
        let mut groups = Vec::new();
        for (o, (&(cx, cy), dir)) in centers.iter().zip(directions).enumerate() {
            let base: [f64; 3] = [rng.random_range(0.3..0.9), rng.random_range(0.3..0.9), rng.random_range(0.3..0.9)];
            let mut members = Vec::new();
            for j in 0..4 {
                for i in 0..4 {
                    let mu = Vector3::new(
                        cx + (i as f64 - 1.5) * spacing,
                        cy + (j as f64 - 1.5) * spacing,
                        depth + rng.random_range(-0.02..0.02),
                    );
                    let color = base.map(|c| (c + rng.random_range(-0.25..0.25)).clamp(0.05, 0.95));
                    let axis = Vector3::new(0.0, 0.0, rng.random_range(-0.5..0.5));
                    let q = UnitQuaternion::from_scaled_axis(axis).into_inner();
                    members.push(gaussians.len());
                    gaussians.push(Gaussian {
                        mu,
                        log_scale: Vector3::new(
                            (0.045 * rng.random_range(0.8..1.2f64)).ln(),
                            (0.045 * rng.random_range(0.8..1.2f64)).ln(),
                            (0.03f64).ln(),
                        ),
                        rotation: nalgebra::Vector4::new(q.w, q.i, q.j, q.k),
                        opacity_logit: logit(0.95),
                        color,
                    });
                }
            }
            let amp = 0.2;
            groups.push(MotionGroup {
                members,
                motion: Motion::Oscillate {
                    amplitude: dir.map(|d| d * amp),
                    period: 1.0 / 3.0,
                    phase: o as f64 * 0.9,
                },
            });
        }
        Self {
            intrinsics,
            background: [0.2, 0.2, 0.2],
            gaussians,
            script: DeformationScript { groups },
            camera: vec![CameraKey::from_pose(0.0, &Pose::identity())],
            duration_us: 600_000,
            dense_intervals: 60,
            keyframe_stride: 5,
        }
    }
}
