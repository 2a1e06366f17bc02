//! Short training runs on the toy scene.

use evsplat_core::contrast::FlowField;
use evsplat_core::events::{EventStream, SimulatorConfig};
use evsplat_core::gaussian::script::SceneDescription;
use evsplat_core::gaussian::DeformationConfig;
use evsplat_core::supervision::{
    heldout_psnr, perturbed, record_scene, train, DynamicModel, FlowProvider, LossWeights, Recording, TrainConfig,
    TrainingData,
};

/// Zero flow everywhere, enough to exercise the motion term.
struct Still;

impl FlowProvider for Still {
    fn flow(&self, events: &EventStream, _: u64, _: u64) -> evsplat_core::Result<FlowField> {
        Ok(FlowField::zeros(events.width(), events.height()))
    }
}

fn setup() -> (SceneDescription, Recording) {
    let scene = SceneDescription::toy(0);
    let rec = record_scene(&scene, 2, &SimulatorConfig::default()).unwrap();
    (scene, rec)
}

fn model(scene: &SceneDescription, seed: u64) -> DynamicModel {
    let init = perturbed(&scene.gaussians, 0.02, 0.1, seed);
    DynamicModel::new(init, scene.camera_trajectory().unwrap(), DeformationConfig::narrow(16), 8, seed).unwrap()
}

fn config(iterations: usize, warmup: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        weights: LossWeights { warmup, ..Default::default() },
        lr_gaussians: 1e-3,
        deformation: DeformationConfig::narrow(16),
        posenet_hidden: 8,
        rebind_period: 10,
        eval_every: 0,
        ..Default::default()
    }
}

#[test]
fn rgb_warmup_improves_keyframe_fit() {
    let (scene, rec) = setup();
    let keys = rec.keyframe_frames();
    let mut m = model(&scene, 1);
    let before = heldout_psnr(&m, &keys, &scene.intrinsics, scene.background).unwrap();
    let data = TrainingData {
        intrinsics: scene.intrinsics,
        background: scene.background,
        keyframes: &keys,
        holdout: &[],
        events: &rec.events,
        duration_us: scene.duration_us,
        flow: None,
    };
    let report = train(&mut m, &data, &TrainConfig { motion_loss: false, ..config(80, 80) }).unwrap();
    assert!(report.log.iter().all(|r| r.l_event.is_none() && r.l_motion.is_none()));
    let after = heldout_psnr(&m, &keys, &scene.intrinsics, scene.background).unwrap();
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn full_objective_is_deterministic_and_round_trips() {
    let (scene, rec) = setup();
    let (keys, hold) = (rec.keyframe_frames(), rec.holdout_frames());
    let data = TrainingData {
        intrinsics: scene.intrinsics,
        background: scene.background,
        keyframes: &keys,
        holdout: &hold,
        events: &rec.events,
        duration_us: scene.duration_us,
        flow: Some(&Still),
    };
    let run = || {
        let mut m = model(&scene, 2);
        let report = train(&mut m, &data, &config(24, 8)).unwrap();
        (m, report)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(m1.to_json().unwrap(), m2.to_json().unwrap());
    assert!(r1.rebinds > 0);
    assert!(r1.log[8..].iter().all(|r| r.l_event.is_some()));
    assert!(r1.log.last().unwrap().psnr.is_some());

    let back = DynamicModel::from_json(&m1.to_json().unwrap()).unwrap();
    assert_eq!(back.to_json().unwrap(), m1.to_json().unwrap());
}
