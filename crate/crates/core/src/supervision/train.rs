//! Two-phase training loop and held-out evaluation.

use std::collections::BTreeMap;

use nalgebra::{SMatrix, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{gaussian_params, set_gaussian_params, DynamicModel, ModelGrads};
use super::{
    branch_for, ego_jacobian, event_loss, l1_image_loss, l1_sign, project_with_jacobian, pseudo_label, weighted_flow, Branch,
    LossWeights,
};
use crate::association::{bind, default_cutoff, filter_events_near, should_rebind, unproject_events, BindingTable};
use crate::contrast::FlowField;
use crate::error::{Error, Result};
use crate::events::{accumulate_polarity, voxelize, EventStream, DEFAULT_CONTRAST_THRESHOLD};
use crate::flow::{LoraAdapter, TiledFlowPredictor};
use crate::gaussian::script::SceneDescription;
use crate::gaussian::{render, render_backward, DeformationConfig, Offsets, PoseNet, RenderOutput, RenderSettings};
use crate::geometry::{project, CameraIntrinsics, Pose, RigidVelocity};
use crate::metrics::psnr;
use crate::nn::Adam;
use crate::raster::{ColorImage, Plane, DISPLAY_GAMMA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total iterations, warm-up included.
    pub iterations: usize,
    pub weights: LossWeights,
    pub lr_gaussians: f64,
    pub lr_deformation: f64,
    pub lr_posenet: f64,
    pub rebind_period: usize,
    pub neighbors: usize,
    pub alpha_threshold: f64,
    /// Half-width of the binding event slice, as a fraction of the keyframe interval.
    pub delta_t_fraction: f64,
    /// Length of the motion-loss window, as a fraction of the keyframe interval.
    pub motion_window: f64,
    pub contrast_threshold: f64,
    pub display_gamma: f64,
    pub event_loss: bool,
    pub motion_loss: bool,
    pub deformation: DeformationConfig,
    pub posenet_hidden: usize,
    /// Held-out PSNR is logged every this many iterations and at the last one.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            weights: LossWeights::default(),
            lr_gaussians: 1.6e-4,
            lr_deformation: 1.6e-4,
            lr_posenet: 1e-4,
            rebind_period: crate::association::REBIND_PERIOD,
            neighbors: crate::association::DEFAULT_K,
            alpha_threshold: crate::association::ALPHA_THRESHOLD,
            delta_t_fraction: 0.1,
            motion_window: 1.0,
            contrast_threshold: DEFAULT_CONTRAST_THRESHOLD,
            display_gamma: DISPLAY_GAMMA,
            event_loss: true,
            motion_loss: true,
            deformation: DeformationConfig::default(),
            posenet_hidden: PoseNet::DEFAULT_HIDDEN,
            eval_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if !(self.weights.gamma2_tau > 0.0) {
            return bad("gamma2 time constant must be positive");
        }
        if [self.lr_gaussians, self.lr_deformation, self.lr_posenet].iter().any(|lr| !(*lr >= 0.0)) {
            return bad("learning rates must be non-negative");
        }
        if self.rebind_period == 0 || self.neighbors == 0 {
            return bad("rebind period and neighbor count must be positive");
        }
        if !(self.motion_window > 0.0 && self.motion_window <= 1.0) {
            return bad("motion window must lie in (0, 1]");
        }
        if !(self.delta_t_fraction >= 0.0) || !(self.contrast_threshold > 0.0) || !(self.display_gamma > 0.0) {
            return bad("delta_t fraction, contrast threshold and gamma must be positive");
        }
        self.deformation.validate()
    }
}

/// An RGB frame at normalized time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub image: ColorImage,
}

/// Predicted per-pixel displacement of the events in `[t_start, t_end]` (microseconds).
pub trait FlowProvider {
    fn flow(&self, events: &EventStream, t_start: u64, t_end: u64) -> Result<FlowField>;
}

/// Frozen predictor with an optional fine-tuned adapter.
#[derive(Debug, Clone)]
pub struct PredictorFlow {
    pub predictor: TiledFlowPredictor,
    pub adapter: Option<LoraAdapter>,
}

impl FlowProvider for PredictorFlow {
    fn flow(&self, events: &EventStream, t_start: u64, t_end: u64) -> Result<FlowField> {
        let grid = voxelize(events, t_start, t_end, self.predictor.config().bins)?;
        self.predictor.predict(&grid, self.adapter.as_ref())
    }
}

pub struct TrainingData<'a> {
    pub intrinsics: CameraIntrinsics,
    pub background: [f64; 3],
    /// Sparse RGB keyframes in increasing time order.
    pub keyframes: &'a [Frame],
    /// Frames used only for logged PSNR.
    pub holdout: &'a [Frame],
    pub events: &'a EventStream,
    pub duration_us: u64,
    pub flow: Option<&'a dyn FlowProvider>,
}

impl TrainingData<'_> {
    fn to_us(&self, t: f64) -> u64 {
        (t * self.duration_us as f64).round().max(0.0) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub l_rgb: f64,
    pub l_event: Option<f64>,
    pub l_motion: Option<f64>,
    pub gamma2: f64,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub rebinds: usize,
}

/// Everything the motion term needs besides the model.
#[derive(Debug, Clone)]
pub struct MotionContext<'a> {
    pub table: &'a BindingTable,
    /// Predicted displacement of the window's events.
    pub flow: &'a FlowField,
    /// Rendered inverse depth; NaN where invalid.
    pub inverse_depth: &'a Plane,
    /// Pose used to project both deformed positions.
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub t_start: f64,
    pub t_end: f64,
    /// Interpolated-trajectory velocity per unit normalized time.
    pub base_velocity: RigidVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionTerms {
    pub loss: f64,
    /// Gaussians that contributed a residual.
    pub used: usize,
}

/// Motion loss of `model` over `ctx`; with `grads`, accumulates `scale · ∂L/∂θ`.
///
/// The camera-correction velocity is evaluated at the window midpoint and added to the
/// trajectory velocity before the ego-flow term.
pub fn motion_objective(model: &DynamicModel, ctx: &MotionContext, grads: Option<(&mut ModelGrads, f64)>) -> MotionTerms {
    let positions: Vec<Vector3<f64>> = model.gaussians.iter().map(|g| g.mu).collect();
    let (off0, trace0) = model.deformation.forward(&positions, ctx.t_start);
    let (off1, trace1) = model.deformation.forward(&positions, ctx.t_end);
    let mid = 0.5 * (ctx.t_start + ctx.t_end);
    let (xi, ptrace) = model.posenet.forward(mid);
    let dur = ctx.t_end - ctx.t_start;
    let vel = SMatrix::<f64, 6, 1>::from(ctx.base_velocity.add(&xi).as_array()) * dur;

    struct Residual {
        i: usize,
        sign: Vector2<f64>,
        a: SMatrix<f64, 2, 6>,
        j0: nalgebra::Matrix2x3<f64>,
        j1: nalgebra::Matrix2x3<f64>,
    }
    let mut total = 0.0;
    let mut residuals = Vec::new();
    for i in 0..model.gaussians.len() {
        let bindings = ctx.table.get(i);
        if bindings.is_empty() {
            continue;
        }
        let (pred, centroid) = weighted_flow(bindings, ctx.flow);
        let inv_depth: f64 = bindings
            .iter()
            .map(|b| b.weight * ctx.inverse_depth.get(b.pixel[0] as usize, b.pixel[1] as usize))
            .sum();
        if !(inv_depth.is_finite() && inv_depth > 0.0) {
            continue;
        }
        let mu = model.gaussians[i].mu;
        let (Some((p0, j0)), Some((p1, j1))) = (
            project_with_jacobian(&(mu + off0[i].dx), &ctx.pose, &ctx.intrinsics),
            project_with_jacobian(&(mu + off1[i].dx), &ctx.pose, &ctx.intrinsics),
        ) else {
            continue;
        };
        let a = ego_jacobian(&ctx.intrinsics, centroid, inv_depth);
        let r = pred - (a * vel + (p1 - p0));
        total += r.abs().sum();
        residuals.push(Residual { i, sign: r.map(l1_sign), a, j0, j1 });
    }
    let used = residuals.len();
    if used == 0 {
        log::warn!("motion loss has no bound Gaussians");
        return MotionTerms { loss: 0.0, used };
    }
    let Some((grads, scale)) = grads else { return MotionTerms { loss: total / used as f64, used } };

    let n = model.gaussians.len();
    let mut g_off0 = vec![Offsets::default(); n];
    let mut g_off1 = vec![Offsets::default(); n];
    let mut g_vel = SMatrix::<f64, 6, 1>::zeros();
    for r in &residuals {
        // d loss / d (ego + scene)
        let g = -r.sign * (scale / used as f64);
        g_vel += r.a.transpose() * g;
        let d1 = r.j1.transpose() * g;
        let d0 = -(r.j0.transpose() * g);
        g_off1[r.i].dx = d1;
        g_off0[r.i].dx = d0;
        grads.add_mu(r.i, &(d0 + d1));
    }
    model.deformation.backward(&trace0, &g_off0, &mut grads.deformation);
    model.deformation.backward(&trace1, &g_off1, &mut grads.deformation);
    let g_xi = RigidVelocity::from_array((g_vel * dur).into());
    model.posenet.backward(&ptrace, &g_xi, &mut grads.posenet);
    MotionTerms { loss: total / used as f64, used }
}

/// Renders the model at `t` and backpropagates `scale ·` the image loss into `grads`.
fn image_objective(
    model: &DynamicModel,
    t: f64,
    pose: &Pose,
    intr: &CameraIntrinsics,
    settings: &RenderSettings,
    loss: impl FnOnce(&ColorImage) -> (f64, ColorImage),
    grads: &mut ModelGrads,
    scale: f64,
) -> Result<(f64, RenderOutput, Vec<Vector3<f64>>)> {
    let (deformed, _, trace) = model.deformation.deform(&model.gaussians, t);
    let out = render(&deformed, pose, intr, settings);
    let (value, mut grad_img) = loss(&out.color);
    for px in &mut grad_img.data {
        px.iter_mut().for_each(|v| *v *= scale);
    }
    let g = render_backward(&deformed, &out, &grad_img)?;
    grads.add_render(&g);
    let offsets: Vec<Offsets> =
        (0..g.len()).map(|i| Offsets { dx: g.mu[i], ds: g.log_scale[i], dq: g.rotation[i] }).collect();
    model.deformation.backward(&trace, &offsets, &mut grads.deformation);
    let positions = deformed.iter().map(|g| g.mu).collect();
    Ok((value, out, positions))
}

fn inverse_depth_plane(out: &RenderOutput) -> Plane {
    Plane::from_fn(out.width(), out.height(), |x, y| out.inverse_depth(x, y).unwrap_or(f64::NAN))
}

/// Mean PSNR of the model's renders against `frames`.
pub fn heldout_psnr(model: &DynamicModel, frames: &[Frame], intr: &CameraIntrinsics, background: [f64; 3]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::InsufficientFrames(0));
    }
    let settings = RenderSettings { background, keep_records: false, ..RenderSettings::default() };
    let mut total = 0.0;
    for f in frames {
        let out = render(&model.gaussians_at(f.t), &model.pose_at(f.t)?, intr, &settings);
        total += psnr(&out.color, &f.image)?;
    }
    Ok(total / frames.len() as f64)
}

/// Mean endpoint error of projected per-Gaussian displacement over `intervals`, against the
/// scripted ground truth, averaged over the scene's dynamic Gaussians.
///
/// The model's Gaussians must be index-aligned with the scene's.
pub fn scene_flow_epe(model: &DynamicModel, truth: &SceneDescription, intervals: &[(f64, f64)]) -> Result<f64> {
    let n = truth.gaussians.len();
    if model.gaussians.len() != n {
        return Err(Error::Shape(format!("model has {} Gaussians, scene has {n}", model.gaussians.len())));
    }
    let mask = truth.script.dynamic_mask(n);
    let trajectory = truth.camera_trajectory()?;
    let intr = &truth.intrinsics;
    let positions: Vec<Vector3<f64>> = model.gaussians.iter().map(|g| g.mu).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for &(ta, tb) in intervals {
        let pose = trajectory.interpolate(ta)?;
        let (oa, _) = model.deformation.forward(&positions, ta);
        let (ob, _) = model.deformation.forward(&positions, tb);
        let (da, db) = (truth.script.displacements(n, ta), truth.script.displacements(n, tb));
        for i in (0..n).filter(|&i| mask[i]) {
            let gt = truth.gaussians[i].mu;
            let truth_flow = project(&(gt + db[i]), &pose, intr)?.pixel - project(&(gt + da[i]), &pose, intr)?.pixel;
            let mu = positions[i];
            let (Ok(pa), Ok(pb)) = (project(&(mu + oa[i].dx), &pose, intr), project(&(mu + ob[i].dx), &pose, intr)) else {
                return Err(Error::BehindCamera { depth: f64::NAN });
            };
            total += (pb.pixel - pa.pixel - truth_flow).norm();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("no dynamic Gaussians to evaluate".into()));
    }
    Ok(total / count as f64)
}

struct Optimizers {
    gaussians: Adam,
    deformation: Adam,
    posenet: Adam,
}

impl Optimizers {
    fn new(model: &DynamicModel) -> Self {
        let g = ModelGrads::zeros(model);
        Self {
            gaussians: Adam::new(g.gaussians.len()),
            deformation: Adam::new(g.deformation.len()),
            posenet: Adam::new(g.posenet.len()),
        }
    }

    fn step(&mut self, model: &mut DynamicModel, grads: &ModelGrads, config: &TrainConfig) {
        let mut flat = gaussian_params(&model.gaussians);
        self.gaussians.step(&mut flat, &grads.gaussians, config.lr_gaussians);
        set_gaussian_params(&mut model.gaussians, &flat);
        self.deformation.step(model.deformation.params_mut(), &grads.deformation, config.lr_deformation);
        self.posenet.step(model.posenet.params_mut(), &grads.posenet, config.lr_posenet);
    }
}

/// Optimizes `model` in place: `L_rgb` alone during warm-up, then the full weighted loss.
pub fn train(model: &mut DynamicModel, data: &TrainingData, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let frames = data.keyframes;
    if frames.len() < 2 {
        return Err(Error::InsufficientFrames(frames.len()));
    }
    if let Some(i) = frames.windows(2).position(|w| !(w[1].t > w[0].t)) {
        return Err(Error::Ordering(i + 1));
    }
    if config.motion_loss && data.flow.is_none() {
        return Err(Error::Config("motion loss needs a flow provider".into()));
    }
    let intr = &data.intrinsics;
    let settings = RenderSettings { background: data.background, ..RenderSettings::default() };
    let weights = config.weights;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizers::new(model);
    let mut tables: Vec<Option<BindingTable>> = vec![None; frames.len()];
    let mut flows: BTreeMap<(usize, bool), FlowField> = BTreeMap::new();
    let mut report = TrainReport::default();

    for iter in 0..config.iterations {
        let mut grads = ModelGrads::zeros(model);
        let gamma2 = weights.gamma2(iter);
        let (l_rgb, l_event, l_motion);
        if weights.in_warmup(iter) {
            let k = rng.random_range(0..frames.len());
            let pose = model.pose_at(frames[k].t)?;
            let target = &frames[k].image;
            l_rgb = image_objective(model, frames[k].t, &pose, intr, &settings, |c| l1_image_loss(c, target), &mut grads, 1.0)?.0;
            l_event = None;
            l_motion = None;
        } else {
            let p = rng.random_range(0..frames.len() - 1);
            let (t0, t2) = (frames[p].t, frames[p + 1].t);
            let t_e = loop {
                let v = rng.random_range(t0..t2);
                if v > t0 {
                    break v;
                }
            };
            let branch = branch_for(t_e, t0, t2);
            let kref = if branch == Branch::Left { p } else { p + 1 };
            let ref_pose = model.pose_at(frames[kref].t)?;
            let target = &frames[kref].image;
            let (value, ref_out, ref_positions) =
                image_objective(model, frames[kref].t, &ref_pose, intr, &settings, |c| l1_image_loss(c, target), &mut grads, 1.0)?;
            l_rgb = value;

            l_event = if config.event_loss {
                let polarity = match branch {
                    Branch::Left => accumulate_polarity(data.events, data.to_us(t0), data.to_us(t_e), config.contrast_threshold),
                    Branch::Right => accumulate_polarity(data.events, data.to_us(t_e), data.to_us(t2), config.contrast_threshold),
                };
                let label = pseudo_label(target, &polarity, branch, config.display_gamma);
                let pose = model.pose_at(t_e)?;
                let gamma = config.display_gamma;
                let loss = |c: &ColorImage| event_loss(c, &label, gamma);
                Some(image_objective(model, t_e, &pose, intr, &settings, loss, &mut grads, weights.gamma1)?.0)
            } else {
                None
            };

            l_motion = if config.motion_loss {
                if should_rebind(iter - weights.warmup, config.rebind_period) {
                    tables.iter_mut().for_each(|t| *t = None);
                }
                let interval = t2 - t0;
                if tables[kref].is_none() {
                    let delta = data.to_us(config.delta_t_fraction * interval);
                    let near = filter_events_near(data.events, data.to_us(frames[kref].t), delta);
                    let lifted = unproject_events(near.events(), &ref_out.depth, &ref_out.alpha, &ref_pose, intr, config.alpha_threshold);
                    tables[kref] = Some(bind(&ref_positions, &lifted, config.neighbors, default_cutoff(&ref_positions)));
                    report.rebinds += 1;
                }
                let w = config.motion_window * interval;
                let (ts, te) = match branch {
                    Branch::Left => (t0, t0 + w),
                    Branch::Right => (t2 - w, t2),
                };
                let key = (p, branch == Branch::Left);
                if !flows.contains_key(&key) {
                    let provider = data.flow.expect("checked above");
                    flows.insert(key, provider.flow(data.events, data.to_us(ts), data.to_us(te))?);
                }
                let inverse_depth = inverse_depth_plane(&ref_out);
                let ctx = MotionContext {
                    table: tables[kref].as_ref().expect("bound above"),
                    flow: &flows[&key],
                    inverse_depth: &inverse_depth,
                    pose: ref_pose,
                    intrinsics: *intr,
                    t_start: ts,
                    t_end: te,
                    base_velocity: model.trajectory.segment_velocity(0.5 * (ts + te))?,
                };
                Some(motion_objective(model, &ctx, Some((&mut grads, gamma2))).loss)
            } else {
                None
            };
        }

        let total = weights.total_loss(l_rgb, l_event.unwrap_or(0.0), l_motion.unwrap_or(0.0), iter);
        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                step: iter,
                detail: format!("l_rgb={l_rgb} l_event={l_event:?} l_motion={l_motion:?} gamma2={gamma2}"),
            });
        }
        opt.step(model, &grads, config);

        let last = iter + 1 == config.iterations;
        let psnr = if !data.holdout.is_empty() && (last || (config.eval_every > 0 && iter % config.eval_every == 0)) {
            Some(heldout_psnr(model, data.holdout, intr, data.background)?)
        } else {
            None
        };
        report.log.push(LogRow { iteration: iter, l_rgb, l_event, l_motion, gamma2, psnr });
    }
    Ok(report)
}
