//! TOML run configuration shared by every command.

use std::path::{Path, PathBuf};

use evsplat_core::events::{SimulatorConfig, DEFAULT_BINS, DEFAULT_CONTRAST_THRESHOLD, INTENSITY_FLOOR};
use evsplat_core::flow::{FlowTrainConfig, PredictorConfig};
use evsplat_core::supervision::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventFormat {
    Csv,
    #[default]
    Binary,
}

impl EventFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Binary => "bin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    #[default]
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Png => "png",
            Self::Ppm => "ppm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Scene JSON with Gaussians, camera path and deformation script.
    pub scene: PathBuf,
    /// Directory every command reads from and writes into.
    pub output: PathBuf,
    /// Pretrained predictor; defaults to the one `pretrain-flow` writes into `output`.
    pub predictor: Option<PathBuf>,
    /// Model checkpoint to start training from instead of the perturbed scene Gaussians.
    pub init_model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Renders per dense frame interval fed to the event simulator.
    pub substeps: usize,
    pub contrast_threshold: f64,
    pub event_format: EventFormat,
    pub image_format: ImageFormat,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            substeps: 8,
            contrast_threshold: DEFAULT_CONTRAST_THRESHOLD,
            event_format: EventFormat::default(),
            image_format: ImageFormat::default(),
        }
    }
}

impl SimulateSection {
    pub fn simulator(&self) -> SimulatorConfig {
        SimulatorConfig { threshold: self.contrast_threshold, intensity_floor: INTENSITY_FLOOR, threshold_jitter: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub patch: usize,
    pub hidden: usize,
    pub bins: usize,
    pub output_scale: f64,
    /// TV weight `λ`, shared by pretraining and adaptation.
    pub tv_weight: f64,
    pub reference_times: Vec<f64>,
    /// Flow windows span this fraction of the keyframe interval.
    pub window_fraction: f64,
    /// Randomized-motion copies of the scene in the pretraining corpus.
    pub pretrain_scenes: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: [f64; 2],
    pub amplitude_range: [f64; 2],
    pub period_range: [f64; 2],
    pub finetune_epochs: usize,
    pub finetune_lr: [f64; 2],
    pub rank: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            patch: 16,
            hidden: 64,
            bins: DEFAULT_BINS,
            output_scale: 4.0,
            tv_weight: 0.1,
            reference_times: vec![0.0, 1.0],
            window_fraction: 0.4,
            pretrain_scenes: 8,
            pretrain_epochs: 30,
            pretrain_lr: [2e-3, 2e-4],
            amplitude_range: [0.1, 0.3],
            period_range: [0.25, 0.5],
            finetune_epochs: 3,
            finetune_lr: [5e-4, 1e-4],
            rank: 16,
        }
    }
}

impl FlowSection {
    pub fn predictor(&self, width: usize, height: usize) -> PredictorConfig {
        PredictorConfig {
            width,
            height,
            patch: self.patch,
            bins: self.bins,
            hidden: self.hidden,
            output_scale: self.output_scale,
        }
    }

    fn schedule(&self, epochs: usize, lr: [f64; 2], seed: u64) -> FlowTrainConfig {
        FlowTrainConfig {
            epochs,
            lr_start: lr[0],
            lr_end: lr[1],
            tv_weight: self.tv_weight,
            reference_times: self.reference_times.clone(),
            seed,
            ..FlowTrainConfig::default()
        }
    }

    pub fn pretrain_schedule(&self, seed: u64) -> FlowTrainConfig {
        self.schedule(self.pretrain_epochs, self.pretrain_lr, seed)
    }

    pub fn finetune_schedule(&self, seed: u64) -> FlowTrainConfig {
        self.schedule(self.finetune_epochs, self.finetune_lr, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    /// Noise on the initial Gaussian positions, in scene units.
    pub init_position_sigma: f64,
    pub init_color_sigma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { config: TrainConfig::default(), init_position_sigma: 0.01, init_color_sigma: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every stochastic choice: corpus motions, network and adapter init, `t_e` sampling.
    pub seed: u64,
    pub paths: Paths,
    pub simulate: SimulateSection,
    pub flow: FlowSection,
    pub train: TrainSection,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub no_event_loss: bool,
    pub no_motion_loss: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.scene);
        fix(&mut self.paths.output);
        self.paths.predictor.iter_mut().for_each(fix);
        self.paths.init_model.iter_mut().for_each(fix);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(n) = o.iterations {
            self.train.config.iterations = n;
        }
        self.train.config.event_loss &= !o.no_event_loss;
        self.train.config.motion_loss &= !o.no_motion_loss;
        self.train.config.seed = self.seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Ablation tag derived from which losses are enabled.
    pub fn ablation_tag(&self) -> &'static str {
        match (self.train.config.event_loss, self.train.config.motion_loss) {
            (true, true) => "full",
            (false, true) => "no-event-loss",
            (true, false) => "no-motion-loss",
            (false, false) => "rgb-only",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.simulate.substeps == 0 {
            return Err(CliError::Config("simulate.substeps must be positive".into()));
        }
        if !(self.flow.window_fraction > 0.0 && self.flow.window_fraction <= 1.0) {
            return Err(CliError::Config("flow.window_fraction must lie in (0, 1]".into()));
        }
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] < r[1];
        if !ordered(self.flow.amplitude_range) || !ordered(self.flow.period_range) {
            return Err(CliError::Config("flow amplitude and period ranges must be positive and increasing".into()));
        }
        if self.flow.pretrain_scenes == 0 || self.flow.rank == 0 {
            return Err(CliError::Config("flow.pretrain_scenes and flow.rank must be positive".into()));
        }
        self.flow.pretrain_schedule(self.seed).validate()?;
        self.flow.finetune_schedule(self.seed).validate()?;
        self.train.config.validate()?;
        Ok(())
    }
}
