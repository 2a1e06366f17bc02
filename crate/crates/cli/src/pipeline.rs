//! The commands behind the `evsplat` binary, operating on a run directory.

use std::path::{Path, PathBuf};

use evsplat_core::association::{bind, default_cutoff, unproject_events, BindingTable};
use evsplat_core::events::EventStream;
use evsplat_core::flow::{self, locm_finetune, pretrain, FlowSample, LoraAdapter, TiledFlowPredictor};
use evsplat_core::gaussian::script::SceneDescription;
use evsplat_core::gaussian::{render as render_scene, RenderSettings};
use evsplat_core::metrics::{psnr, ssim};
use evsplat_core::supervision::{
    self, perturbed, record_scene, scene_flow_epe, DynamicModel, Frame, PredictorFlow, TrainReport, TrainingData,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{self, FrameEntry, FrameIndex};
use crate::viz::flow_color_wheel;

/// File layout inside the configured output directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn events(&self, config: &RunConfig) -> PathBuf {
        self.root.join(format!("events.{}", config.simulate.event_format.extension()))
    }

    pub fn frame_index(&self) -> PathBuf {
        self.root.join("frames").join("index.json")
    }

    pub fn flow_dir(&self) -> PathBuf {
        self.root.join("flow")
    }

    pub fn predictor(&self) -> PathBuf {
        self.flow_dir().join("predictor.ckpt")
    }

    pub fn adapter(&self) -> PathBuf {
        self.flow_dir().join("adapter.ckpt")
    }

    /// Training outputs for one ablation tag.
    pub fn train_dir(&self, tag: &str) -> PathBuf {
        self.root.join(format!("train_{tag}"))
    }

    pub fn model(&self, tag: &str) -> PathBuf {
        self.train_dir(tag).join("model.json")
    }

    pub fn metrics(&self, tag: &str) -> PathBuf {
        self.train_dir(tag).join("metrics.csv")
    }

    pub fn report(&self, tag: &str) -> PathBuf {
        self.train_dir(tag).join("report.csv")
    }
}

pub fn run_dir(config: &RunConfig) -> RunDir {
    RunDir::new(&config.paths.output)
}

pub fn load_scene(config: &RunConfig) -> Result<SceneDescription> {
    let path = &config.paths.scene;
    if !path.exists() {
        return Err(CliError::Config(format!("scene file {} does not exist", path.display())));
    }
    let scene: SceneDescription = formats::read_json(path)?;
    scene.validate()?;
    Ok(scene)
}

fn keyframe_interval(scene: &SceneDescription) -> f64 {
    scene.keyframe_stride as f64 / scene.dense_intervals as f64
}

/// Flow window length in microseconds.
pub fn flow_window_us(config: &RunConfig, scene: &SceneDescription) -> u64 {
    scene.to_us(config.flow.window_fraction * keyframe_interval(scene)).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SimulateSummary {
    pub events: usize,
    pub frames: usize,
    pub keyframes: usize,
}

/// Renders the scene, simulates events and writes them with the dense and keyframe images.
pub fn simulate(config: &RunConfig) -> Result<SimulateSummary> {
    config.validate()?;
    let scene = load_scene(config)?;
    let rec = record_scene(&scene, config.simulate.substeps, &config.simulate.simulator())?;
    let dir = run_dir(config);
    formats::write_events(&dir.events(config), &rec.events)?;
    let ext = config.simulate.image_format.extension();
    let mut index = FrameIndex::default();
    for (i, frame) in rec.dense.iter().enumerate() {
        let file = PathBuf::from(format!("frame_{i:04}.{ext}"));
        formats::write_image(&dir.root.join("frames").join(&file), &frame.image)?;
        index.frames.push(FrameEntry { index: i, t: frame.t, keyframe: rec.keyframes.contains(&i), file });
    }
    formats::write_json(&dir.frame_index(), &index)?;
    Ok(SimulateSummary { events: rec.events.len(), frames: rec.dense.len(), keyframes: rec.keyframes.len() })
}

/// Frames and events written by [`simulate`].
#[derive(Debug, Clone)]
pub struct Recorded {
    pub events: EventStream,
    pub index: FrameIndex,
    pub keyframes: Vec<Frame>,
    pub holdout: Vec<Frame>,
}

pub fn load_recorded(config: &RunConfig) -> Result<Recorded> {
    let dir = run_dir(config);
    let index_path = dir.frame_index();
    if !index_path.exists() {
        return Err(CliError::Config(format!("{} is missing; run `simulate` first", index_path.display())));
    }
    let index: FrameIndex = formats::read_json(&index_path)?;
    let base = index_path.parent().expect("index lives in a directory");
    let (mut keyframes, mut holdout) = (Vec::new(), Vec::new());
    for entry in &index.frames {
        let frame = Frame { t: entry.t, image: formats::read_image(&base.join(&entry.file))? };
        if entry.keyframe {
            keyframes.push(frame);
        } else {
            holdout.push(frame);
        }
    }
    let events = formats::read_events(&dir.events(config))?;
    Ok(Recorded { events, index, keyframes, holdout })
}

/// Pretraining corpus: events of scene copies with randomized oscillations, cut into
/// non-overlapping flow windows.
pub fn pretrain_corpus(config: &RunConfig, scene: &SceneDescription) -> Result<Vec<FlowSample>> {
    let f = &config.flow;
    let window = flow_window_us(config, scene);
    let mut corpus = Vec::new();
    for s in 0..f.pretrain_scenes as u64 {
        let variant = scene.with_random_oscillations(
            config.seed.wrapping_mul(1000).wrapping_add(s),
            f.amplitude_range[0]..f.amplitude_range[1],
            f.period_range[0]..f.period_range[1],
        );
        let rec = record_scene(&variant, config.simulate.substeps, &config.simulate.simulator())?;
        corpus.extend(FlowSample::sliding(&rec.events, window, window, f.bins)?);
    }
    Ok(corpus)
}

/// Trains a fresh predictor on [`pretrain_corpus`] and writes its checkpoint and loss curve.
pub fn pretrain_flow(config: &RunConfig) -> Result<flow::TrainReport> {
    config.validate()?;
    let scene = load_scene(config)?;
    let corpus = pretrain_corpus(config, &scene)?;
    let pc = config.flow.predictor(scene.intrinsics.width, scene.intrinsics.height);
    let mut predictor = TiledFlowPredictor::new(pc, config.seed)?;
    let report = pretrain(&mut predictor, &corpus, &config.flow.pretrain_schedule(config.seed))?;
    let dir = run_dir(config);
    formats::write_bytes(&predictor_path(config), &predictor.to_checkpoint())?;
    formats::write_text(&dir.flow_dir().join("pretrain_loss.csv"), &formats::loss_curve_csv(&report.epoch_losses))?;
    Ok(report)
}

fn predictor_path(config: &RunConfig) -> PathBuf {
    config.paths.predictor.clone().unwrap_or_else(|| run_dir(config).predictor())
}

pub fn load_predictor(config: &RunConfig) -> Result<TiledFlowPredictor> {
    let path = predictor_path(config);
    if !path.exists() {
        return Err(CliError::Config(format!("predictor checkpoint {} does not exist", path.display())));
    }
    Ok(TiledFlowPredictor::from_checkpoint(&formats::read_bytes(&path)?)?)
}

/// Half-overlapping flow windows over the recorded stream, used for adaptation.
pub fn adaptation_samples(config: &RunConfig, scene: &SceneDescription, events: &EventStream) -> Result<Vec<FlowSample>> {
    let window = flow_window_us(config, scene);
    Ok(FlowSample::sliding(events, window, (window / 2).max(1), config.flow.bins)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSummary {
    pub report: flow::TrainReport,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
}

/// Fits a fresh adapter to the recorded events with the base weights frozen.
pub fn finetune_flow(config: &RunConfig) -> Result<FinetuneSummary> {
    config.validate()?;
    let scene = load_scene(config)?;
    let predictor = load_predictor(config)?;
    let events = formats::read_events(&run_dir(config).events(config))?;
    let samples = adaptation_samples(config, &scene, &events)?;
    let before = predictor.base_checksum();
    let mut adapter = LoraAdapter::new(predictor.config(), config.flow.rank, config.seed)?;
    let report = locm_finetune(&predictor, &mut adapter, &samples, &config.flow.finetune_schedule(config.seed))?;
    let after = predictor.base_checksum();

    let dir = run_dir(config).flow_dir();
    formats::write_bytes(&dir.join("adapter.ckpt"), &adapter.to_checkpoint(predictor.config()))?;
    formats::write_text(&dir.join("finetune_loss.csv"), &formats::loss_curve_csv(&report.epoch_losses))?;
    if let Some(sample) = samples.iter().max_by_key(|s| s.events.len()) {
        let frozen = predictor.predict(&sample.grid, None)?;
        let adapted = predictor.predict(&sample.grid, Some(&adapter))?;
        let max = frozen.data.iter().chain(&adapted.data).map(|v| v[0].hypot(v[1])).fold(0.0, f64::max);
        for (name, field) in [("before", &frozen), ("after", &adapted)] {
            formats::write_image(&dir.join(format!("flow_{name}.png")), &flow_color_wheel(field, Some(max)))?;
            let flat: Vec<f64> = field.data.iter().flatten().copied().collect();
            formats::write_bytes(&dir.join(format!("flow_{name}.f32")), &formats::planes_to_bytes(field.width, field.height, 2, &flat))?;
        }
    }
    Ok(FinetuneSummary { report, base_checksum_before: before, base_checksum_after: after })
}

fn flow_provider(config: &RunConfig) -> Result<Option<PredictorFlow>> {
    if !config.train.config.motion_loss {
        return Ok(None);
    }
    let predictor = load_predictor(config)?;
    let adapter_path = run_dir(config).adapter();
    let adapter = if adapter_path.exists() {
        Some(LoraAdapter::from_checkpoint(&formats::read_bytes(&adapter_path)?, predictor.config())?)
    } else {
        log::warn!("{} not found; using the frozen predictor", adapter_path.display());
        None
    };
    Ok(Some(PredictorFlow { predictor, adapter }))
}

fn initial_model(config: &RunConfig, scene: &SceneDescription) -> Result<DynamicModel> {
    if let Some(path) = &config.paths.init_model {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        return Ok(DynamicModel::from_json(&text)?);
    }
    let t = &config.train;
    let init = perturbed(&scene.gaussians, t.init_position_sigma, t.init_color_sigma, config.seed);
    Ok(DynamicModel::new(init, scene.camera_trajectory()?, t.config.deformation.clone(), t.config.posenet_hidden, config.seed)?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub tag: &'static str,
    pub report: TrainReport,
    pub metrics: MetricsReport,
}

/// Trains, then writes the model, the per-iteration log, renders and the evaluation report.
/// On divergence the model state at that point is saved as `model_diverged.json`.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let scene = load_scene(config)?;
    let rec = load_recorded(config)?;
    let provider = flow_provider(config)?;
    let mut model = initial_model(config, &scene)?;
    let data = TrainingData {
        intrinsics: scene.intrinsics,
        background: scene.background,
        keyframes: &rec.keyframes,
        holdout: &rec.holdout,
        events: &rec.events,
        duration_us: scene.duration_us,
        flow: provider.as_ref().map(|p| p as &dyn supervision::FlowProvider),
    };
    let tag = config.ablation_tag();
    let dir = run_dir(config);
    let out = dir.train_dir(tag);
    let report = match supervision::train(&mut model, &data, &config.train.config) {
        Ok(r) => r,
        Err(e) => {
            formats::write_text(&out.join("model_diverged.json"), &model.to_json()?)?;
            return Err(e.into());
        }
    };
    formats::write_text(&out.join("config.toml"), &config.to_toml())?;
    formats::write_text(&dir.model(tag), &model.to_json()?)?;
    formats::write_text(&dir.metrics(tag), &formats::training_log_csv(&report.log))?;
    render_views(config, &scene, &model, &rec.index)?;
    let metrics = evaluate_model(config, &scene, &model, &rec)?;
    Ok(TrainOutcome { tag, report, metrics })
}

pub fn load_model(config: &RunConfig) -> Result<DynamicModel> {
    let path = run_dir(config).model(config.ablation_tag());
    if !path.exists() {
        return Err(CliError::Config(format!("{} does not exist; run `train` first", path.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    Ok(DynamicModel::from_json(&text)?)
}

fn render_views(config: &RunConfig, scene: &SceneDescription, model: &DynamicModel, index: &FrameIndex) -> Result<()> {
    let dir = run_dir(config).train_dir(config.ablation_tag()).join("renders");
    let settings = RenderSettings { background: scene.background, keep_records: false, ..RenderSettings::default() };
    let ext = config.simulate.image_format.extension();
    for entry in &index.frames {
        let out = render_scene(&model.gaussians_at(entry.t), &model.pose_at(entry.t)?, &scene.intrinsics, &settings);
        let i = entry.index;
        formats::write_image(&dir.join(format!("frame_{i:04}.{ext}")), &out.color)?;
        formats::write_plane(&dir.join(format!("depth_{i:04}.f32")), &out.depth)?;
        formats::write_image(&dir.join(format!("depth_{i:04}.{ext}")), &formats::plane_preview(&out.depth))?;
    }
    Ok(())
}

/// Renders color and depth of a trained model at every recorded frame time.
pub fn render(config: &RunConfig) -> Result<usize> {
    config.validate()?;
    let scene = load_scene(config)?;
    let model = load_model(config)?;
    let index: FrameIndex = formats::read_json(&run_dir(config).frame_index())?;
    render_views(config, &scene, &model, &index)?;
    Ok(index.frames.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub index: usize,
    pub t: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tag: String,
    /// Held-out (non-keyframe) views.
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean projected endpoint error of dynamic Gaussians over held-out frame intervals,
    /// when the scene's deformation script provides ground truth.
    pub scene_flow_epe: Option<f64>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tag,view,t,psnr,ssim\n");
        for v in &self.views {
            s += &format!("{},{},{},{},{}\n", self.tag, v.index, v.t, v.psnr, v.ssim);
        }
        s += &format!("{},mean,,{},{}\n", self.tag, self.mean_psnr, self.mean_ssim);
        s
    }
}

/// Dense frame intervals that do not start at a keyframe.
pub fn heldout_intervals(index: &FrameIndex) -> Vec<(f64, f64)> {
    index.frames.windows(2).filter(|w| !w[0].keyframe).map(|w| (w[0].t, w[1].t)).collect()
}

fn evaluate_model(config: &RunConfig, scene: &SceneDescription, model: &DynamicModel, rec: &Recorded) -> Result<MetricsReport> {
    let settings = RenderSettings { background: scene.background, keep_records: false, ..RenderSettings::default() };
    let mut views = Vec::new();
    let held = rec.index.frames.iter().filter(|e| !e.keyframe);
    for (entry, frame) in held.zip(&rec.holdout) {
        let out = render_scene(&model.gaussians_at(frame.t), &model.pose_at(frame.t)?, &scene.intrinsics, &settings);
        views.push(ViewMetrics { index: entry.index, t: frame.t, psnr: psnr(&out.color, &frame.image)?, ssim: ssim(&out.color, &frame.image)? });
    }
    let n = views.len().max(1) as f64;
    let has_motion = scene.script.dynamic_mask(scene.gaussians.len()).contains(&true);
    let intervals = heldout_intervals(&rec.index);
    let epe = if has_motion && model.gaussians.len() == scene.gaussians.len() && !intervals.is_empty() {
        Some(scene_flow_epe(model, scene, &intervals)?)
    } else {
        None
    };
    let report = MetricsReport {
        tag: config.ablation_tag().to_string(),
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
        scene_flow_epe: epe,
    };
    let dir = run_dir(config);
    let tag = config.ablation_tag();
    formats::write_text(&dir.report(tag), &report.to_csv())?;
    formats::write_json(&dir.train_dir(tag).join("summary.json"), &report)?;
    formats::write_text(&dir.train_dir(tag).join("bindings.csv"), &formats::bindings_to_csv(&first_binding(config, scene, model, rec)?))?;
    Ok(report)
}

/// Binding table of the first keyframe under the trained model, for inspection. Event ids
/// index the full recorded stream.
fn first_binding(config: &RunConfig, scene: &SceneDescription, model: &DynamicModel, rec: &Recorded) -> Result<BindingTable> {
    let (Some(first), Some(second)) = (rec.keyframes.first(), rec.keyframes.get(1)) else {
        return Ok(BindingTable::empty(model.gaussians.len()));
    };
    let tc = &config.train.config;
    let pose = model.pose_at(first.t)?;
    let deformed = model.gaussians_at(first.t);
    let out = render_scene(&deformed, &pose, &scene.intrinsics, &RenderSettings { background: scene.background, keep_records: false, ..RenderSettings::default() });
    let delta = scene.to_us(tc.delta_t_fraction * (second.t - first.t));
    let t0 = scene.to_us(first.t);
    let range = rec.events.range_closed(t0.saturating_sub(delta), t0.saturating_add(delta));
    let offset = range.start;
    let mut lifted = unproject_events(&rec.events.events()[range], &out.depth, &out.alpha, &pose, &scene.intrinsics, tc.alpha_threshold);
    lifted.iter_mut().for_each(|e| e.id += offset);
    let positions: Vec<_> = deformed.iter().map(|g| g.mu).collect();
    Ok(bind(&positions, &lifted, tc.neighbors, default_cutoff(&positions)))
}

/// Re-evaluates a trained model against the recorded frames.
pub fn eval(config: &RunConfig) -> Result<MetricsReport> {
    config.validate()?;
    let scene = load_scene(config)?;
    let model = load_model(config)?;
    let rec = load_recorded(config)?;
    evaluate_model(config, &scene, &model, &rec)
}

/// Writes the bundled toy scene JSON, for `evsplat init` style bootstrapping and tests.
pub fn write_toy_scene(path: &Path, seed: u64) -> Result<()> {
    formats::write_json(path, &SceneDescription::toy(seed))
}
