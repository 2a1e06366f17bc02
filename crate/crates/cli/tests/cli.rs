//! End-to-end runs of the `evsplat` binary on small variants of the toy scene.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evsplat_cli::formats;
use evsplat_cli::RunConfig;
use evsplat_core::flow::{LoraAdapter, TiledFlowPredictor};
use evsplat_core::gaussian::script::{Motion, SceneDescription};
use serde_json::Value;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    /// Writes the toy scene and a shortened config, both editable before use.
    fn new(edit_scene: impl FnOnce(&mut SceneDescription), edit_config: impl FnOnce(&mut RunConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut scene = SceneDescription::toy(0);
        edit_scene(&mut scene);
        formats::write_json(&root.join("scene.json"), &scene).unwrap();

        let mut config = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/toy.toml")).unwrap();
        config.paths.scene = "scene.json".into();
        config.paths.output = "out".into();
        config.flow.pretrain_scenes = 1;
        config.flow.pretrain_epochs = 2;
        config.train.config.iterations = 30;
        config.train.config.weights.warmup = 15;
        config.train.config.eval_every = 10;
        edit_config(&mut config);
        std::fs::write(root.join("run.toml"), config.to_toml()).unwrap();
        Self { _dir: dir, root }
    }

    fn toy() -> Self {
        Self::new(|_| {}, |_| {})
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.root.join("run.toml");
        Command::new(env!("CARGO_BIN_EXE_evsplat"))
            .args(&args[..1])
            .arg("--config")
            .arg(&config)
            .args(&args[1..])
            .output()
            .unwrap()
    }

    /// Runs a command that must succeed and returns its JSON summary.
    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    }
}

#[test]
fn simulate_is_deterministic() {
    let ws = Workspace::toy();
    let summary = ws.ok(&["simulate"]);
    assert!(summary["events"].as_u64().unwrap() > 0);
    assert_eq!(summary["frames"], 61);
    assert_eq!(summary["keyframes"], 13);
    let first = std::fs::read(ws.out().join("events.bin")).unwrap();
    ws.ok(&["simulate", "--output", ws.root.join("again").to_str().unwrap()]);
    assert_eq!(first, std::fs::read(ws.root.join("again/events.bin")).unwrap());
}

#[test]
fn static_scene_gives_empty_event_file() {
    let ws = Workspace::new(|s| s.script.groups.iter_mut().for_each(|g| g.motion = Motion::Static), |_| {});
    assert_eq!(ws.ok(&["simulate"])["events"], 0);
    assert!(formats::read_events(&ws.out().join("events.bin")).unwrap().is_empty());
}

#[test]
fn lower_threshold_gives_at_least_as_many_events() {
    let coarse = Workspace::toy();
    let fine = Workspace::new(|_| {}, |c| c.simulate.contrast_threshold = 0.05);
    let n_coarse = coarse.ok(&["simulate"])["events"].as_u64().unwrap();
    let n_fine = fine.ok(&["simulate"])["events"].as_u64().unwrap();
    assert!(n_fine >= n_coarse, "{n_fine} < {n_coarse}");
}

#[test]
fn csv_and_binary_event_files_agree() {
    let bin = Workspace::toy();
    let csv = Workspace::new(|_| {}, |c| c.simulate.event_format = evsplat_cli::config::EventFormat::Csv);
    bin.ok(&["simulate"]);
    csv.ok(&["simulate"]);
    assert_eq!(
        formats::read_events(&bin.out().join("events.bin")).unwrap(),
        formats::read_events(&csv.out().join("events.csv")).unwrap()
    );
}

#[test]
fn ppm_frames_are_binary_p6() {
    let ws = Workspace::new(|_| {}, |c| c.simulate.image_format = evsplat_cli::config::ImageFormat::Ppm);
    ws.ok(&["simulate"]);
    let bytes = std::fs::read(ws.out().join("frames/frame_0000.ppm")).unwrap();
    assert!(bytes.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(image::open(ws.out().join("frames/frame_0000.ppm")).unwrap().width(), 64);
}

#[test]
fn finetune_without_checkpoint_is_a_config_error() {
    let ws = Workspace::toy();
    ws.ok(&["simulate"]);
    let out = ws.run(&["finetune-flow"]);
    assert_eq!(out.status.code(), Some(2));
    let line: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"]["kind"], "config");
    assert!(line["error"]["message"].as_str().unwrap().contains("predictor"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::toy();
    let path = ws.root.join("run.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, format!("colour = 1\n{text}")).unwrap();
    let out = ws.run(&["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    let line: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"]["kind"], "config");
}

#[test]
fn train_before_simulate_fails_cleanly() {
    let ws = Workspace::toy();
    let out = ws.run(&["train", "--no-motion-loss"]);
    assert!(!out.status.success());
    assert!(serde_json::from_slice::<Value>(&out.stderr).is_ok());
}

#[test]
fn finetune_keeps_base_and_adapter_round_trips() {
    let ws = Workspace::toy();
    ws.ok(&["simulate"]);
    ws.ok(&["pretrain-flow"]);
    let summary = ws.ok(&["finetune-flow"]);
    assert_eq!(summary["base_unchanged"], true);
    let losses: Vec<f64> = serde_json::from_value(summary["epoch_losses"].clone()).unwrap();
    assert_eq!(losses.len(), 3);
    assert!(losses[2] <= losses[0], "{losses:?}");

    let flow = ws.out().join("flow");
    let predictor = TiledFlowPredictor::from_checkpoint(&std::fs::read(flow.join("predictor.ckpt")).unwrap()).unwrap();
    let bytes = std::fs::read(flow.join("adapter.ckpt")).unwrap();
    let adapter = LoraAdapter::from_checkpoint(&bytes, predictor.config()).unwrap();
    assert_eq!(adapter.to_checkpoint(predictor.config()), bytes);
    for name in ["flow_before.png", "flow_after.png"] {
        assert_eq!(image::open(flow.join(name)).unwrap().width(), 64);
    }
    let curve = std::fs::read_to_string(flow.join("finetune_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
}

#[test]
fn train_render_eval_round() {
    let ws = Workspace::toy();
    ws.ok(&["simulate"]);
    ws.ok(&["pretrain-flow"]);
    ws.ok(&["finetune-flow"]);
    let trained = ws.ok(&["train"]);
    assert_eq!(trained["tag"], "full");
    assert!(trained["mean_psnr"].as_f64().unwrap() > 0.0);
    assert!(trained["scene_flow_epe"].as_f64().unwrap().is_finite());

    let dir = ws.out().join("train_full");
    let log = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "iteration,l_rgb,l_event,l_motion,gamma2,psnr");
    assert_eq!(log.lines().count(), 31);
    let report = std::fs::read(dir.join("report.csv")).unwrap();

    assert_eq!(ws.ok(&["render"])["frames"], 61);
    assert!(image::open(dir.join("renders/frame_0003.png")).is_ok());
    assert!(image::open(dir.join("renders/depth_0003.png")).is_ok());
    let evaluated = ws.ok(&["eval"]);
    assert_eq!(evaluated["mean_psnr"], trained["mean_psnr"]);
    assert_eq!(std::fs::read(dir.join("report.csv")).unwrap(), report);
}

#[test]
fn ablation_flags_select_output_directory() {
    let ws = Workspace::toy();
    ws.ok(&["simulate"]);
    // without the motion term no predictor is needed
    assert_eq!(ws.ok(&["train", "--no-motion-loss", "--iterations", "10"])["tag"], "no-motion-loss");
    assert!(ws.out().join("train_no-motion-loss/model.json").exists());
    assert_eq!(ws.ok(&["train", "--no-motion-loss", "--no-event-loss", "--iterations", "10"])["tag"], "rgb-only");
    let out = ws.run(&["eval", "--no-event-loss"]);
    assert_eq!(out.status.code(), Some(2));
}
