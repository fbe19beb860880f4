use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_pipeline::SynthConfig;
use crate::error::{Error, Result};
use crate::global_fit::FitConfig;
use crate::lifting_net::LossWeights;
use crate::prior_net::ModelConfig;

/// Learning-rate schedule over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to zero over `max_steps`.
    Cosine,
}

/// One optimization stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Each training sequence is occluded at a ratio drawn from this range,
    /// freshly for every step.
    pub occlusion_ratio_range: (f64, f64),
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.01,
            occlusion_ratio_range: (0.1, 0.5),
            max_steps: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stage: &str) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("{stage}: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        let (a, b) = self.occlusion_ratio_range;
        if !(0.0 <= a && a <= b && b <= 0.5) {
            return bad("occlusion_ratio_range must lie within [0, 0.5]");
        }
        if self.lr_schedule == LrSchedule::Cosine && self.max_steps.is_none_or(|m| m == 0) {
            return bad("the cosine schedule needs a positive max_steps");
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        match (self.lr_schedule, self.max_steps) {
            (LrSchedule::Cosine, Some(total)) if total > 0 => {
                let x = (step.min(total) as f64) / total as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * x).cos())
            }
            _ => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Directory of sample archives to train on instead of synthesizing.
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    /// Seed offset separating the evaluation stream from the training one.
    pub eval_seed_offset: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 2000,
            eval_samples: 200,
            train_dir: None,
            eval_dir: None,
            eval_seed_offset: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftingOptions {
    pub use_prior: bool,
    pub freeze_prior: bool,
    pub weights: LossWeights,
}

impl Default for LiftingOptions {
    fn default() -> Self {
        Self {
            use_prior: true,
            freeze_prior: false,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Occlusion ratio applied to evaluation sequences.
    pub occlusion_ratio: f64,
    pub sweep_ratios: Vec<f64>,
    pub batch_size: usize,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            occlusion_ratio: 0.3,
            sweep_ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            batch_size: 64,
            threshold: crate::data_pipeline::DEFAULT_THRESHOLD,
        }
    }
}

/// Everything a command needs; written back verbatim into checkpoints and
/// reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Body model archive; the built-in procedural model when absent.
    pub body_model: Option<PathBuf>,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub prior: TrainConfig,
    pub lifting: TrainConfig,
    pub lifting_options: LiftingOptions,
    pub fit: FitConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            body_model: None,
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            prior: TrainConfig::default(),
            lifting: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            lifting_options: LiftingOptions::default(),
            fit: FitConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.prior.validate("prior")?;
        self.lifting.validate("lifting")?;
        if self.synth.frames != self.model.frames {
            return Err(Error::InvalidConfig(format!(
                "synth.frames ({}) must equal model.frames ({})",
                self.synth.frames, self.model.frames
            )));
        }
        if self.model.joints != crate::body_model::NUM_LSP_JOINTS {
            return Err(Error::InvalidConfig("model.joints must be 14 (LSP order)".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::InvalidConfig("eval.batch_size must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.eval.occlusion_ratio)
            || self.eval.sweep_ratios.iter().any(|r| !(0.0..=0.5).contains(r))
        {
            return Err(Error::InvalidConfig("evaluation occlusion ratios must lie in [0, 0.5]".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::InvalidConfig("eval.threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
