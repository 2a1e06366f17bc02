use nalgebra::{UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::association::{bind, UnprojectedEvent};
use crate::events::{EventStream, Polarity};
use crate::gaussian::{render, DeformationConfig, KeyframeTrajectory, RenderSettings};

fn intr() -> CameraIntrinsics {
    CameraIntrinsics::new(100.0, 90.0, 32.0, 30.0, 64, 60).unwrap()
}

#[test]
fn gamma2_schedule_values() {
    let w = LossWeights::default();
    for it in [0usize, 1000, 4000, 20000] {
        let expected = 1.0 - (-(it as f64) / 4000.0).exp();
        assert!((w.gamma2(it) - expected).abs() < 1e-12);
    }
    assert_eq!(w.gamma2(0), 0.0);
    assert!((w.gamma2(4000) - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    assert!((1..200).all(|k| w.gamma2(k * 100) > w.gamma2((k - 1) * 100)));
    assert!(w.gamma2(1_000_000) <= 1.0 && w.gamma2(1_000_000) > 1.0 - 1e-12);
    assert!(w.in_warmup(3499) && !w.in_warmup(3500));
    assert_eq!(w.total_loss(0.3, 0.2, 7.0, 0), 0.5);
}

#[test]
fn ego_flow_examples() {
    let k = intr();
    let depth = Plane::filled(64, 60, 0.5);
    let zero = ego_flow(&k, &depth, &RigidVelocity::zero());
    assert!(zero.data.iter().all(|f| *f == [0.0, 0.0]));

    let omega = 0.3;
    let spin = RigidVelocity::new(Vector3::zeros(), Vector3::new(0.0, 0.0, omega));
    let px = Vector2::new(50.0, 12.0);
    let n = k.normalize(px);
    let f = ego_flow_at(&k, px, 0.5, &spin);
    assert!((f.x - k.fx * n.y * omega).abs() < 1e-12);
    assert!((f.y + k.fy * n.x * omega).abs() < 1e-12);

    let forward = RigidVelocity::new(Vector3::new(0.0, 0.0, 1.5), Vector3::zeros());
    let c = ego_flow_at(&k, Vector2::new(k.cx, k.cy), 0.5, &forward);
    assert_eq!(c, Vector2::zeros());
}

#[test]
fn ego_flow_marks_invalid_depth() {
    let mut depth = Plane::filled(4, 4, 1.0);
    depth.set(1, 2, f64::NAN);
    depth.set(3, 0, 0.0);
    let k = CameraIntrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4).unwrap();
    let f = ego_flow(&k, &depth, &RigidVelocity::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()));
    assert!(f.get(1, 2)[0].is_nan() && f.get(3, 0)[1].is_nan());
    assert!(f.get(0, 0)[0].is_finite());
}

#[test]
fn ego_flow_matches_finite_difference_oracle() {
    let k = intr();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dt = 1e-3;
    let twists = [
        RigidVelocity::new(Vector3::new(0.4, -0.2, 0.3), Vector3::zeros()),
        RigidVelocity::new(Vector3::zeros(), Vector3::new(0.2, -0.3, 0.25)),
        RigidVelocity::new(Vector3::new(-0.3, 0.1, 0.5), Vector3::new(0.1, 0.2, -0.3)),
    ];
    let base = Pose::new(UnitQuaternion::from_scaled_axis(Vector3::new(0.05, -0.1, 0.02)), Vector3::new(0.1, 0.0, 0.3));
    for vel in &twists {
        let moved = Pose::from_velocity(vel, dt).compose(&base);
        for _ in 0..100 {
            let px = Vector2::new(rng.random_range(2.0..62.0), rng.random_range(2.0..58.0));
            let z = rng.random_range(1.0..4.0);
            let p = crate::geometry::unproject(px, z, &base, &k).unwrap();
            let numeric = (project(&p, &moved, &k).unwrap().pixel - px) / dt;
            let analytic = ego_flow_at(&k, px, 1.0 / z, vel);
            let rel = (numeric - analytic).norm() / analytic.norm().max(1e-9);
            assert!(rel < 0.01, "relative error {rel}");
        }
    }
}

proptest! {
    #[test]
    fn ego_flow_is_linear(
        a in -2.0..2.0f64, b in -2.0..2.0f64,
        v1 in prop::array::uniform6(-1.0..1.0f64), v2 in prop::array::uniform6(-1.0..1.0f64),
        x in 0.0..64.0f64, y in 0.0..60.0f64, r in 0.1..2.0f64,
    ) {
        let k = intr();
        let (p, q) = (RigidVelocity::from_array(v1), RigidVelocity::from_array(v2));
        let px = Vector2::new(x, y);
        let lhs = ego_flow_at(&k, px, r, &p.scaled(a).add(&q.scaled(b)));
        let rhs = ego_flow_at(&k, px, r, &p) * a + ego_flow_at(&k, px, r, &q) * b;
        prop_assert!((lhs - rhs).norm() <= 1e-9 * (1.0 + rhs.norm()));
    }
}

/// `δx = (0.1 t, 0, 0)` through a two-layer trunk that passes the raw time input.
fn linear_in_time_field() -> DeformationField {
    let config = DeformationConfig { position_freqs: 1, time_freqs: 1, depth: 2, width: 1, skip_layer: 1 };
    let shapes = config.shapes();
    let mut params = vec![0.0; shapes.iter().map(|s| s.param_count()).sum()];
    let raw_t = 3 * 3;
    params[raw_t] = 1.0;
    let l1 = shapes[0].param_count();
    params[l1] = 1.0;
    let head = l1 + shapes[1].param_count();
    params[head] = 0.1;
    DeformationField::from_params(config, params).unwrap()
}

#[test]
fn scene_flow_examples() {
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.05, 0.9, [0.5; 3]);
    let fresh = DeformationField::new(DeformationConfig::narrow(8), 1).unwrap();
    let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
    assert_eq!(gaussian_scene_flow(&g, &fresh, 0.1, 0.7, &Pose::identity(), &k).unwrap(), Vector2::zeros());

    let field = linear_in_time_field();
    let f = gaussian_scene_flow(&g, &field, 0.0, 1.0, &Pose::identity(), &k).unwrap();
    assert!((f - Vector2::new(10.0, 0.0)).norm() < 1e-9, "{f}");

    let small = gaussian_scene_flow(&g, &field, 0.0, 0.01, &Pose::identity(), &k).unwrap();
    let k2 = CameraIntrinsics { fx: 200.0, ..k };
    let doubled = gaussian_scene_flow(&g, &field, 0.0, 0.01, &Pose::identity(), &k2).unwrap();
    assert!((doubled.x - 2.0 * small.x).abs() < 1e-9);
}

#[test]
fn scene_flow_behind_camera_is_an_error() {
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.05, 0.9, [0.5; 3]);
    let field = linear_in_time_field();
    assert!(gaussian_scene_flow(&g, &field, 0.0, 1.0, &Pose::identity(), &intr()).is_err());
}

#[test]
fn event_loss_examples() {
    let anchor = ColorImage::filled(1, 1, [0.2; 3]);
    let pol = Plane::filled(1, 1, 0.1);
    let label = pseudo_label(&anchor, &pol, Branch::Left, 1.0);
    let render = ColorImage::filled(1, 1, [0.2 * 0.1f64.exp(); 3]);
    let (loss, _) = event_loss(&render, &label, 1.0);
    assert!(loss < 1e-15, "{loss}");

    let silent = pseudo_label(&anchor, &Plane::zeros(1, 1), Branch::Left, 1.0);
    assert_eq!(event_loss(&anchor, &silent, 1.0).0, 0.0);

    let right = pseudo_label(&anchor, &pol, Branch::Right, 1.0);
    assert!((right.data[0][0] - 0.2 / 0.1f64.exp()).abs() < 1e-15);

    assert_eq!(branch_for(0.5, 0.0, 1.0), Branch::Left);
    assert_eq!(branch_for(0.5000001, 0.0, 1.0), Branch::Right);
    assert_eq!(branch_for(0.2, 0.0, 1.0), Branch::Left);
}

#[test]
fn event_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut render = ColorImage::zeros(3, 2);
    let mut label = ColorImage::zeros(3, 2);
    for (r, l) in render.data.iter_mut().zip(&mut label.data) {
        for k in 0..3 {
            r[k] = rng.random_range(0.1..0.9);
            l[k] = rng.random_range(0.01..0.8);
        }
    }
    let (_, grad) = event_loss(&render, &label, 2.2);
    for i in 0..render.data.len() {
        for k in 0..3 {
            let h = 1e-7;
            let mut a = render.clone();
            a.data[i][k] += h;
            let mut b = render.clone();
            b.data[i][k] -= h;
            let num = (event_loss(&a, &label, 2.2).0 - event_loss(&b, &label, 2.2).0) / (2.0 * h);
            assert!((num - grad.data[i][k]).abs() < 1e-7);
        }
    }
}

fn single_binding_table() -> BindingTable {
    let ev = UnprojectedEvent { id: 0, point: Vector3::new(0.0, 0.0, 1.0), pixel: [3, 4], t: 0 };
    bind(&[Vector3::new(0.0, 0.0, 1.0)], &[ev], 3, 0.5)
}

#[test]
fn motion_loss_examples() {
    let table = single_binding_table();
    assert_eq!(table.get(0)[0].weight, 1.0);
    let flow = FlowField::constant(8, 8, [5.0, 0.0]);
    let ego = [Some(Vector2::new(2.0, 0.0))];
    assert_eq!(motion_loss(&table, &flow, &ego, &[Some(Vector2::new(3.0, 0.0))]), 0.0);
    assert_eq!(motion_loss(&table, &flow, &ego, &[Some(Vector2::zeros())]), 3.0);
    assert_eq!(motion_loss(&BindingTable::empty(1), &flow, &ego, &[Some(Vector2::zeros())]), 0.0);
}

#[test]
fn static_motion_loss_is_zero() {
    let k = intr();
    let gaussians: Vec<Gaussian> =
        (0..4).map(|i| Gaussian::isotropic(Vector3::new(0.1 * i as f64, 0.0, 2.0), 0.05, 0.9, [0.5; 3])).collect();
    let traj = KeyframeTrajectory::new(vec![0.0, 1.0], vec![Pose::identity(); 2]).unwrap();
    let model = DynamicModel::new(gaussians.clone(), traj, DeformationConfig::narrow(8), 8, 0).unwrap();
    let events: Vec<UnprojectedEvent> = gaussians
        .iter()
        .enumerate()
        .map(|(id, g)| {
            let px = project(&g.mu, &Pose::identity(), &k).unwrap().pixel;
            UnprojectedEvent { id, point: g.mu, pixel: [px.x.round() as u16, px.y.round() as u16], t: 0 }
        })
        .collect();
    let positions: Vec<Vector3<f64>> = gaussians.iter().map(|g| g.mu).collect();
    let table = bind(&positions, &events, 3, 1.0);
    let flow = FlowField::zeros(64, 60);
    let inv = Plane::filled(64, 60, 0.5);
    let ctx = MotionContext {
        table: &table,
        flow: &flow,
        inverse_depth: &inv,
        pose: Pose::identity(),
        intrinsics: k,
        t_start: 0.2,
        t_end: 0.4,
        base_velocity: RigidVelocity::zero(),
    };
    let terms = motion_objective(&model, &ctx, None);
    assert_eq!(terms.loss, 0.0);
    assert_eq!(terms.used, 4);
}

fn random_model(seed: u64) -> DynamicModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians: Vec<Gaussian> = (0..6)
        .map(|_| {
            let mu = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(1.5..2.5));
            Gaussian::isotropic(mu, 0.05, 0.9, [0.5; 3])
        })
        .collect();
    let traj = KeyframeTrajectory::new(vec![0.0, 0.5, 1.0], vec![Pose::identity(); 3]).unwrap();
    let config = DeformationConfig { position_freqs: 2, time_freqs: 2, depth: 3, width: 6, skip_layer: 1 };
    let mut model = DynamicModel::new(gaussians, traj, config, 5, seed).unwrap();
    for v in model.deformation.params_mut().iter_mut().rev().take(70) {
        *v = rng.random_range(-0.3..0.3);
    }
    for v in model.posenet.params_mut().iter_mut().rev().take(36) {
        *v = rng.random_range(-0.5..0.5);
    }
    model
}

#[test]
fn motion_gradients_match_finite_differences() {
    let k = intr();
    let model = random_model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let events: Vec<UnprojectedEvent> = (0..40)
        .map(|id| {
            let g = &model.gaussians[id % 6];
            let point = g.mu + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0);
            let px = project(&point, &Pose::identity(), &k).unwrap().pixel;
            UnprojectedEvent { id, point, pixel: [px.x.round().clamp(0.0, 63.0) as u16, px.y.round().clamp(0.0, 59.0) as u16], t: 0 }
        })
        .collect();
    let positions: Vec<Vector3<f64>> = model.gaussians.iter().map(|g| g.mu).collect();
    let table = bind(&positions, &events, 3, 1.0);
    let mut flow = FlowField::zeros(64, 60);
    flow.data.iter_mut().for_each(|f| *f = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)]);
    let inv = Plane::from_fn(64, 60, |x, y| 0.4 + 0.001 * (x + y) as f64);
    let pose = Pose::new(UnitQuaternion::from_scaled_axis(Vector3::new(0.02, -0.01, 0.03)), Vector3::new(0.05, 0.0, 0.1));
    let ctx = MotionContext {
        table: &table,
        flow: &flow,
        inverse_depth: &inv,
        pose,
        intrinsics: k,
        t_start: 0.3,
        t_end: 0.45,
        base_velocity: RigidVelocity::new(Vector3::new(0.3, -0.1, 0.2), Vector3::new(0.05, 0.1, -0.02)),
    };
    let scale = 0.7;
    let mut grads = ModelGrads::zeros(&model);
    let terms = motion_objective(&model, &ctx, Some((&mut grads, scale)));
    assert_eq!(terms.used, 6);
    let value = |m: &DynamicModel| scale * motion_objective(m, &ctx, None).loss;
    let h = 1e-6;
    let check = |analytic: f64, num: f64, what: &str| {
        assert!((analytic - num).abs() <= 1e-3 * analytic.abs().max(num.abs()) + 1e-8, "{what}: {analytic} vs {num}");
    };
    for i in 0..model.deformation.param_count() {
        let mut a = model.clone();
        a.deformation.params_mut()[i] += h;
        let mut b = model.clone();
        b.deformation.params_mut()[i] -= h;
        check(grads.deformation[i], (value(&a) - value(&b)) / (2.0 * h), &format!("deformation {i}"));
    }
    for i in 0..model.posenet.param_count() {
        let mut a = model.clone();
        a.posenet.params_mut()[i] += h;
        let mut b = model.clone();
        b.posenet.params_mut()[i] -= h;
        check(grads.posenet[i], (value(&a) - value(&b)) / (2.0 * h), &format!("posenet {i}"));
    }
    // with a zero head the offsets ignore the encoder input, so finite differences see only the projection
    let mut flat = model.clone();
    let width = flat.deformation.config().width;
    let n = flat.deformation.param_count();
    flat.deformation.params_mut()[n - 10 * width - 10..].iter_mut().for_each(|v| *v = 0.0);
    let mut grads = ModelGrads::zeros(&flat);
    motion_objective(&flat, &ctx, Some((&mut grads, scale)));
    let base = gaussian_params(&flat.gaussians);
    for idx in (0..base.len()).filter(|i| i % GAUSSIAN_PARAMS < 3) {
        let eval = |delta: f64| {
            let mut m = flat.clone();
            let mut p = base.clone();
            p[idx] += delta;
            set_gaussian_params(&mut m.gaussians, &p);
            value(&m)
        };
        check(grads.gaussians[idx], (eval(h) - eval(-h)) / (2.0 * h), &format!("mu {idx}"));
    }
}

#[test]
fn model_checkpoint_round_trip() {
    let model = random_model(4);
    let text = model.to_json().unwrap();
    assert_eq!(DynamicModel::from_json(&text).unwrap(), model);
    assert!(DynamicModel::from_json("{}").is_err());
}

#[test]
fn gaussian_params_round_trip() {
    let model = random_model(9);
    let flat = gaussian_params(&model.gaussians);
    assert_eq!(flat.len(), 6 * GAUSSIAN_PARAMS);
    let mut copy = model.gaussians.clone();
    copy.iter_mut().for_each(|g| g.color = [0.0; 3]);
    set_gaussian_params(&mut copy, &flat);
    assert_eq!(copy, model.gaussians);
}

fn toy_frames(gaussians: &[Gaussian], k: &CameraIntrinsics, times: &[f64], background: [f64; 3]) -> Vec<Frame> {
    let settings = RenderSettings { background, keep_records: false, ..RenderSettings::default() };
    times.iter().map(|&t| Frame { t, image: render(gaussians, &Pose::identity(), k, &settings).color }).collect()
}

fn small_scene() -> (Vec<Gaussian>, CameraIntrinsics) {
    let k = CameraIntrinsics::new(30.0, 30.0, 15.5, 15.5, 32, 32).unwrap();
    let gaussians = (0..9)
        .map(|i| {
            let (x, y) = ((i % 3) as f64 * 0.2 - 0.2, (i / 3) as f64 * 0.2 - 0.2);
            Gaussian::isotropic(Vector3::new(x, y, 2.0), 0.06, 0.9, [0.2 + 0.08 * i as f64, 0.5, 0.9 - 0.07 * i as f64])
        })
        .collect();
    (gaussians, k)
}

#[test]
fn warmup_on_exact_static_scene_is_stable() {
    let (gaussians, k) = small_scene();
    let background = [0.2; 3];
    let frames = toy_frames(&gaussians, &k, &[0.0, 0.5, 1.0], background);
    let traj = KeyframeTrajectory::new(vec![0.0, 1.0], vec![Pose::identity(); 2]).unwrap();
    let mut model = DynamicModel::new(gaussians.clone(), traj, DeformationConfig::narrow(8), 8, 0).unwrap();
    let before = model.clone();
    let events = EventStream::empty(32, 32, 0, 1000);
    let data = TrainingData {
        intrinsics: k,
        background,
        keyframes: &frames,
        holdout: &[],
        events: &events,
        duration_us: 1000,
        flow: None,
    };
    let config = TrainConfig {
        iterations: 30,
        weights: LossWeights { warmup: 30, ..LossWeights::default() },
        event_loss: false,
        motion_loss: false,
        deformation: DeformationConfig::narrow(8),
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &config).unwrap();
    assert!(report.log.iter().all(|r| r.l_rgb < 1e-12 && r.l_event.is_none() && r.l_motion.is_none()));
    assert_eq!(model, before);
}

struct ConstantFlow([f64; 2]);

impl FlowProvider for ConstantFlow {
    fn flow(&self, events: &EventStream, _: u64, _: u64) -> crate::Result<FlowField> {
        Ok(FlowField::constant(events.width(), events.height(), self.0))
    }
}

fn phase_two_run(seed: u64) -> (TrainReport, DynamicModel) {
    let (gaussians, k) = small_scene();
    let background = [0.2; 3];
    let frames = toy_frames(&gaussians, &k, &[0.0, 0.5, 1.0], background);
    let holdout = toy_frames(&gaussians, &k, &[0.25], background);
    let traj = KeyframeTrajectory::new(vec![0.0, 1.0], vec![Pose::identity(); 2]).unwrap();
    let mut model = DynamicModel::new(perturbed(&gaussians, 0.01, 0.05, 3), traj, DeformationConfig::narrow(8), 8, 0).unwrap();
    let events: Vec<_> = (0..200u64)
        .map(|i| crate::events::Event::new(i * 5, (8 + i % 16) as u16, (8 + (i / 16) % 16) as u16, if i % 3 == 0 { Polarity::Negative } else { Polarity::Positive }))
        .collect();
    let events = EventStream::new(events, 32, 32, 0, 1000).unwrap();
    let flow = ConstantFlow([1.0, 0.0]);
    let data = TrainingData {
        intrinsics: k,
        background,
        keyframes: &frames,
        holdout: &holdout,
        events: &events,
        duration_us: 1000,
        flow: Some(&flow),
    };
    let config = TrainConfig {
        iterations: 24,
        weights: LossWeights { warmup: 8, ..LossWeights::default() },
        rebind_period: 5,
        deformation: DeformationConfig::narrow(8),
        posenet_hidden: 8,
        eval_every: 10,
        lr_gaussians: 1e-3,
        lr_deformation: 1e-3,
        lr_posenet: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &config).unwrap();
    (report, model)
}

#[test]
fn full_loss_training_runs_and_is_deterministic() {
    let (report, model) = phase_two_run(7);
    assert_eq!(report.log.len(), 24);
    assert!(report.log[..8].iter().all(|r| r.l_event.is_none() && r.l_motion.is_none()));
    assert!(report.log[8..].iter().all(|r| r.l_event.is_some() && r.l_motion.is_some()));
    assert!(report.rebinds > 0);
    assert!(report.log.iter().filter(|r| r.psnr.is_some()).count() >= 3);
    assert!(report.log.last().unwrap().psnr.is_some());
    let (again, model2) = phase_two_run(7);
    assert_eq!(report, again);
    assert_eq!(model, model2);
}

#[test]
fn motion_loss_without_flow_is_rejected() {
    let (gaussians, k) = small_scene();
    let frames = toy_frames(&gaussians, &k, &[0.0, 1.0], [0.0; 3]);
    let traj = KeyframeTrajectory::new(vec![0.0, 1.0], vec![Pose::identity(); 2]).unwrap();
    let mut model = DynamicModel::new(gaussians, traj, DeformationConfig::narrow(4), 4, 0).unwrap();
    let events = EventStream::empty(32, 32, 0, 1000);
    let data = TrainingData { intrinsics: k, background: [0.0; 3], keyframes: &frames, holdout: &[], events: &events, duration_us: 1000, flow: None };
    let config = TrainConfig { iterations: 2, deformation: DeformationConfig::narrow(4), ..TrainConfig::default() };
    assert!(matches!(train(&mut model, &data, &config), Err(crate::Error::Config(_))));
}
