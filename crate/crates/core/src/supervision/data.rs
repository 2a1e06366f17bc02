//! Ground-truth recordings of a scripted scene: dense RGB frames plus the simulated event stream.

use super::train::Frame;
use crate::error::{Error, Result};
use crate::events::{simulate_events, EventStream, SimulatorConfig};
use crate::gaussian::script::SceneDescription;
use crate::gaussian::{render, RenderSettings};
use crate::raster::{decode_gamma, DISPLAY_GAMMA};

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    /// Frames at every dense time.
    pub dense: Vec<Frame>,
    pub events: EventStream,
    /// Indices into `dense` that serve as RGB keyframes.
    pub keyframes: Vec<usize>,
}

impl Recording {
    pub fn keyframe_frames(&self) -> Vec<Frame> {
        self.keyframes.iter().map(|&i| self.dense[i].clone()).collect()
    }

    /// Dense frames that are not keyframes.
    pub fn holdout_frames(&self) -> Vec<Frame> {
        self.dense.iter().enumerate().filter(|(i, _)| !self.keyframes.contains(i)).map(|(_, f)| f.clone()).collect()
    }
}

/// Renders the scene at every dense time and simulates events from `substeps` renders per
/// dense interval, using the gamma-decoded luminance as linear intensity.
pub fn record_scene(scene: &SceneDescription, substeps: usize, simulator: &SimulatorConfig) -> Result<Recording> {
    scene.validate()?;
    if substeps == 0 {
        return Err(Error::Config("substeps must be positive".into()));
    }
    let trajectory = scene.camera_trajectory()?;
    let settings = RenderSettings { background: scene.background, keep_records: false, ..RenderSettings::default() };
    let frame_at = |t: f64| -> Result<_> {
        Ok(render(&scene.gaussians_at(t), &trajectory.interpolate(t)?, &scene.intrinsics, &settings).color)
    };
    let steps = scene.dense_intervals * substeps;
    let mut planes = Vec::with_capacity(steps + 1);
    let mut stamps = Vec::with_capacity(steps + 1);
    let mut dense = Vec::with_capacity(scene.dense_intervals + 1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let image = frame_at(t)?;
        planes.push(image.luminance().map(|v| decode_gamma(v, DISPLAY_GAMMA)));
        stamps.push(scene.to_us(t));
        if s % substeps == 0 {
            dense.push(Frame { t, image });
        }
    }
    let events = simulate_events(&planes, &stamps, simulator)?;
    Ok(Recording { dense, events, keyframes: scene.keyframe_indices() })
}
