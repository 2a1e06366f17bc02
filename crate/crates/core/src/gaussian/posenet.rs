//! Continuous camera trajectory: interpolated keyframe poses plus a learned twist correction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::deform::positional_encoding;
use crate::error::{Error, Result};
use crate::geometry::{interpolate_pose, relative_velocity, Pose, RigidVelocity};
use crate::nn::LinearShape;

/// Keyframe poses at strictly increasing normalized times.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeTrajectory {
    times: Vec<f64>,
    poses: Vec<Pose>,
}

impl KeyframeTrajectory {
    pub fn new(times: Vec<f64>, poses: Vec<Pose>) -> Result<Self> {
        if times.len() != poses.len() {
            return Err(Error::Shape(format!("{} keyframe times for {} poses", times.len(), poses.len())));
        }
        if times.len() < 2 {
            return Err(Error::InsufficientFrames(times.len()));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Ordering(i + 1));
        }
        Ok(Self { times, poses })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index `k` of the segment `[t_k, t_{k+1}]` holding `t`.
    pub fn segment(&self, t: f64) -> Result<usize> {
        let (start, end) = (self.times[0], *self.times.last().expect("at least two keyframes"));
        if !(t >= start && t <= end) {
            return Err(Error::Extrapolation { t, start, end });
        }
        let k = self.times.partition_point(|&s| s <= t);
        Ok(k.saturating_sub(1).min(self.times.len() - 2))
    }

    /// Index of the keyframe closest to `t`; ties go to the earlier one.
    pub fn nearest(&self, t: f64) -> Result<usize> {
        let k = self.segment(t)?;
        Ok(if t - self.times[k] <= self.times[k + 1] - t { k } else { k + 1 })
    }

    pub fn interpolate(&self, t: f64) -> Result<Pose> {
        let k = self.segment(t)?;
        if t == self.times[k + 1] {
            return Ok(self.poses[k + 1]);
        }
        let alpha = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        Ok(interpolate_pose(&self.poses[k], &self.poses[k + 1], alpha))
    }

    /// Constant velocity of the segment holding `t`, per unit normalized time.
    pub fn segment_velocity(&self, t: f64) -> Result<RigidVelocity> {
        let k = self.segment(t)?;
        relative_velocity(&self.poses[k], &self.poses[k + 1], self.times[k + 1] - self.times[k])
    }
}

/// Small network mapping normalized time to a camera twist correction `(v, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseNet {
    time_freqs: usize,
    hidden: LinearShape,
    head: LinearShape,
    params: Vec<f64>,
}

/// Activations of one [`PoseNet::forward`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrace {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl PoseNet {
    pub const DEFAULT_TIME_FREQS: usize = 6;
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn new(time_freqs: usize, hidden: usize, seed: u64) -> Self {
        let input = 2 * time_freqs + 1;
        let hidden_shape = LinearShape::new(input, hidden);
        let head = LinearShape::new(hidden, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = hidden_shape.init_he(&mut rng);
        params.resize(params.len() + head.param_count(), 0.0);
        Self { time_freqs, hidden: hidden_shape, head, params }
    }

    pub fn from_params(time_freqs: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::new(time_freqs, hidden, 0);
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!("expected {} pose-network parameters, got {}", net.params.len(), params.len())));
        }
        net.params = params;
        Ok(net)
    }

    pub fn time_freqs(&self) -> usize {
        self.time_freqs
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.outputs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Output-head bias, laid out as `(v, w)`.
    pub fn head_bias_mut(&mut self) -> &mut [f64] {
        let n = self.params.len();
        &mut self.params[n - 6..]
    }

    pub fn forward(&self, t: f64) -> (RigidVelocity, PoseTrace) {
        let input = positional_encoding(&[t], self.time_freqs);
        let (p_hidden, p_head) = self.params.split_at(self.hidden.param_count());
        let mut hidden = vec![0.0; self.hidden.outputs];
        self.hidden.forward(p_hidden, &input, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = [0.0; 6];
        self.head.forward(p_head, &hidden, &mut out);
        (RigidVelocity::from_array(out), PoseTrace { input, hidden })
    }

    pub fn correction(&self, t: f64) -> RigidVelocity {
        self.forward(t).0
    }

    pub fn backward(&self, trace: &PoseTrace, grad: &RigidVelocity, grad_params: &mut [f64]) {
        let g_out = grad.as_array();
        let (p_hidden, p_head) = self.params.split_at(self.hidden.param_count());
        let (g_hidden_p, g_head_p) = grad_params.split_at_mut(self.hidden.param_count());
        let mut g_hidden = vec![0.0; self.hidden.outputs];
        self.head.backward(p_head, &trace.hidden, &g_out, g_head_p, Some(&mut g_hidden));
        for (g, h) in g_hidden.iter_mut().zip(&trace.hidden) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        self.hidden.backward(p_hidden, &trace.input, &g_hidden, g_hidden_p, None);
    }

    /// Interpolated pose at `t` advanced by the correction twist over `t - t_k`.
    pub fn pose_at(&self, trajectory: &KeyframeTrajectory, t: f64) -> Result<Pose> {
        let base = trajectory.interpolate(t)?;
        let k = trajectory.segment(t)?;
        let correction = Pose::from_velocity(&self.correction(t), t - trajectory.times()[k]);
        Ok(correction.compose(&base))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, CameraIntrinsics};
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::Rng;

    fn trajectory() -> KeyframeTrajectory {
        let poses = vec![
            Pose::identity(),
            Pose::new(UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.1, 0.0)), Vector3::new(0.2, 0.0, 0.0)),
            Pose::new(UnitQuaternion::from_scaled_axis(Vector3::new(0.05, 0.1, 0.0)), Vector3::new(0.3, 0.1, 0.0)),
        ];
        KeyframeTrajectory::new(vec![0.0, 0.5, 1.0], poses).unwrap()
    }

    #[test]
    fn fresh_posenet_reproduces_keyframes() {
        let traj = trajectory();
        let net = PoseNet::new(6, 16, 3);
        for (t, p) in traj.times().iter().zip(traj.poses()) {
            assert_eq!(net.pose_at(&traj, *t).unwrap(), *p);
        }
        assert_eq!(net.pose_at(&traj, 0.3).unwrap(), traj.interpolate(0.3).unwrap());
    }

    #[test]
    fn extrapolation_is_an_error() {
        let traj = trajectory();
        assert!(matches!(traj.interpolate(1.2), Err(Error::Extrapolation { .. })));
        assert!(PoseNet::new(6, 8, 0).pose_at(&traj, -0.1).is_err());
    }

    #[test]
    fn nearest_keyframe_rule() {
        let traj = trajectory();
        assert_eq!(traj.nearest(0.25).unwrap(), 0);
        assert_eq!(traj.nearest(0.26).unwrap(), 1);
        assert_eq!(traj.nearest(1.0).unwrap(), 2);
    }

    #[test]
    fn rotation_correction_moves_projection() {
        let traj = KeyframeTrajectory::new(vec![0.0, 1.0], vec![Pose::identity(); 2]).unwrap();
        let mut net = PoseNet::new(6, 8, 0);
        net.head_bias_mut()[5] = 0.2;
        let pose = net.pose_at(&traj, 0.5).unwrap();
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let point = Vector3::new(0.3, 0.0, 2.0);
        let moved = project(&point, &pose, &intr).unwrap().pixel;
        // camera rolls by +0.1 rad about z, so the point rolls by -0.1 in the image
        let r = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, -0.1));
        let expected = project(&(r * point), &Pose::identity(), &intr).unwrap().pixel;
        assert!((moved - expected).norm() < 1e-9);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = PoseNet::new(3, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in net.params_mut().iter_mut().rev().take(36) {
            *v = rng.random_range(-0.5..0.5);
        }
        let g = RigidVelocity::from_array([0.3, -0.2, 0.5, 1.0, -0.7, 0.1]);
        let loss = |n: &PoseNet| {
            let v = n.correction(0.63).as_array();
            v.iter().zip(g.as_array()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, trace) = net.forward(0.63);
        let mut gp = vec![0.0; net.param_count()];
        net.backward(&trace, &g, &mut gp);
        for i in 0..net.param_count() {
            let mut a = net.clone();
            a.params_mut()[i] += 1e-6;
            let mut b = net.clone();
            b.params_mut()[i] -= 1e-6;
            let num = (loss(&a) - loss(&b)) / 2e-6;
            assert!((num - gp[i]).abs() < 1e-7, "param {i}: {num} vs {}", gp[i]);
        }
    }
}
