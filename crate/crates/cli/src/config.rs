//! Run configuration: one TOML file covering scenes, model, training and
//! sampling, plus command-line overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use difflane_core::geometry::LaneGrid;
use difflane_core::synthdata::{PaddingMode, SceneConfig};
use difflane_model::assign_loss::LossConfig;
use difflane_model::checkpoint::CompatKey;
use difflane_model::{InferConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives scene generation, weight init, training noise and sampling.
    pub seed: u64,
    /// Anchors per image during training and sampling.
    pub n_train: usize,
    pub noise_scale: f64,
    pub t_max: usize,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub infer: InferSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub padding: PaddingMode,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub steps: usize,
    pub fg_threshold: f64,
    pub nms_iou: f64,
    pub nms_width: f64,
    pub top_k: usize,
    pub resample_last: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            n_train: t.n_train,
            noise_scale: t.noise_scale,
            t_max: t.t_max,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            infer: InferSection::default(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            grad_clip: t.grad_clip,
            padding: t.padding,
            loss: t.loss,
        }
    }
}

impl Default for InferSection {
    fn default() -> Self {
        let i = InferConfig::default();
        Self {
            steps: i.steps,
            fg_threshold: i.fg_threshold,
            nms_iou: i.nms_iou,
            nms_width: i.nms_width,
            top_k: i.top_k,
            resample_last: i.resample_last,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_train: Option<usize>,
    pub noise_scale: Option<f64>,
    pub steps: Option<usize>,
    pub threshold: Option<f64>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    /// Reads `path` (or the defaults) and applies `over`, then validates.
    pub fn load(path: Option<&Path>, over: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = over.seed {
            cfg.seed = v;
        }
        if let Some(v) = over.n_train {
            cfg.n_train = v;
        }
        if let Some(v) = over.noise_scale {
            cfg.noise_scale = v;
        }
        if let Some(v) = over.steps {
            cfg.infer.steps = v;
        }
        if let Some(v) = over.threshold {
            cfg.infer.fg_threshold = v;
        }
        if let Some(v) = over.epochs {
            cfg.train.epochs = v;
        }
        cfg.scene.seed = cfg.seed;
        cfg.model.param_seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train_config().validate()?;
        self.infer_config().validate()?;
        if (self.scene.img_w, self.scene.img_h) != (self.model.img_w, self.model.img_h) {
            bail!(
                "scene size {}x{} differs from model input {}x{}",
                self.scene.img_w,
                self.scene.img_h,
                self.model.img_w,
                self.model.img_h
            );
        }
        if (self.model.y_min - self.scene.horizon()).abs() > 1e-9 {
            bail!("model.y_min {} must equal the scene horizon {}", self.model.y_min, self.scene.horizon());
        }
        if self.model.seg_classes < self.scene.lanes_max + 1 {
            bail!("model.seg_classes must be at least scene.lanes_max + 1");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<LaneGrid> {
        Ok(self.model.grid()?)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            grad_clip: t.grad_clip,
            n_train: self.n_train,
            noise_scale: self.noise_scale,
            t_max: self.t_max,
            seed: self.seed,
            padding: t.padding,
            loss: t.loss.clone(),
        }
    }

    pub fn infer_config(&self) -> InferConfig {
        let i = &self.infer;
        InferConfig {
            steps: i.steps,
            fg_threshold: i.fg_threshold,
            nms_iou: i.nms_iou,
            nms_width: i.nms_width,
            top_k: i.top_k,
            resample_last: i.resample_last,
            n_train: self.n_train,
            noise_scale: self.noise_scale,
            t_max: self.t_max,
            seed: self.seed,
        }
    }

    pub fn compat_key(&self) -> CompatKey {
        CompatKey { model: self.model.clone(), t_max: self.t_max, noise_scale: self.noise_scale }
    }
}
