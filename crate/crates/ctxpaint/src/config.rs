//! Serializable run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use ctxpaint_core::adapters::FreezePolicy;
use ctxpaint_core::diffusion::{AdaptiveConfig, LossWeighting, NoiseSchedule, SamplerConfig};
use ctxpaint_core::{Seed, TaskKind};
use serde::{Deserialize, Serialize};

use crate::backbone::{ToyBackbone, ToyConfig};
use crate::checkpoint::load_backbone;
use crate::data::{DrawOptions, MaskPolicy};
use crate::error::{Error, Result};
use crate::model::PromptSpec;
use crate::optim::AdamWConfig;
use crate::text::ToyTextEncoder;

/// Where the denoiser comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSource {
    Toy {
        #[serde(default)]
        config: ToyConfig,
        /// Pretrained base weights; absent means the seeded initialisation.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<PathBuf>,
    },
    /// A large pretrained denoiser provided by an out-of-tree adapter.
    External { id: String },
}

impl Default for BackboneSource {
    fn default() -> Self {
        BackboneSource::Toy {
            config: ToyConfig::default(),
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Linear β schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(
            self.steps,
            self.beta_start,
            self.beta_end,
        )?)
    }
}

/// Optimisation settings; unset learning rates fall back to the task defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub steps: u64,
    pub batch_size: usize,
    pub prompt_lr: Option<f64>,
    pub adapter_lr: f64,
    pub backbone_lr: f64,
    pub adamw: AdamWConfig,
    pub cfg_drop_prob: f64,
    pub loss_weighting: LossWeighting,
    pub lora_rank: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Validation loss cadence; 0 disables it.
    pub eval_every: u64,
    pub eval_batch: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            prompt_lr: None,
            adapter_lr: 1e-4,
            backbone_lr: 1e-5,
            adamw: AdamWConfig::default(),
            cfg_drop_prob: 0.0,
            loss_weighting: LossWeighting::All,
            lora_rank: 4,
            checkpoint_every: 500,
            log_every: 10,
            eval_every: 0,
            eval_batch: 8,
        }
    }
}

/// Training data location and per-task drawing rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    /// Co-occurrence window applied before training; `None` keeps every record.
    pub cooccurrence: Option<(f64, f64)>,
    pub mask_policy: Option<MaskPolicy>,
    pub draw: Option<DrawOptions>,
    /// Frozen validation masks used by `eval`.
    pub frozen_masks: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.jsonl"),
            cooccurrence: None,
            mask_policy: None,
            draw: None,
            frozen_masks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub backbone: BackboneSource,
    #[serde(default)]
    pub text_seed: Seed,
    /// `None` takes the task default.
    #[serde(default)]
    pub policy: Option<FreezePolicy>,
    #[serde(default)]
    pub prompt: PromptSpec,
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
    #[serde(default)]
    pub adaptive: Option<AdaptiveConfig>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub seed: Seed,
    /// Output directory; relative paths resolve against the checkpoint root.
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("run")
}

impl RunConfig {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            backbone: BackboneSource::default(),
            text_seed: Seed(0),
            policy: None,
            prompt: PromptSpec::default(),
            sampler: None,
            adaptive: None,
            schedule: ScheduleConfig::default(),
            hyper: Hyper::default(),
            data: DataConfig::default(),
            precision: Precision::F32,
            seed: Seed(0),
            run_dir: default_run_dir(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("config serialises");
        fs::write(path, json + "\n").map_err(Error::io(path))
    }

    pub fn policy(&self) -> FreezePolicy {
        self.policy.unwrap_or(self.task.default_freeze_policy())
    }

    pub fn sampler(&self) -> SamplerConfig {
        self.sampler
            .unwrap_or_else(|| SamplerConfig::for_task(self.task, self.seed))
    }

    pub fn prompt_lr(&self) -> f64 {
        self.hyper
            .prompt_lr
            .unwrap_or(self.task.default_prompt_lr())
    }

    pub fn mask_policy(&self) -> MaskPolicy {
        self.data
            .mask_policy
            .clone()
            .unwrap_or_else(|| MaskPolicy::for_task(self.task))
    }

    pub fn draw_options(&self, side: usize) -> DrawOptions {
        self.data
            .draw
            .clone()
            .unwrap_or_else(|| DrawOptions::for_side(side))
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        if h.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&h.cfg_drop_prob) {
            return Err(Error::Config(format!(
                "cfg_drop_prob {} outside [0, 1)",
                h.cfg_drop_prob
            )));
        }
        if h.checkpoint_every == 0 || h.log_every == 0 {
            return Err(Error::Config(
                "checkpoint_every and log_every must be >= 1".into(),
            ));
        }
        if self.policy().uses_lora() && h.lora_rank == 0 {
            return Err(Error::Config("LoRA policies need lora_rank >= 1".into()));
        }
        for lr in [self.prompt_lr(), h.adapter_lr, h.backbone_lr] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "learning rate {lr} must be finite and >= 0"
                )));
            }
        }
        if let Some(p) = &self.data.mask_policy {
            p.validate()?;
        }
        if let Some((lo, hi)) = self.data.cooccurrence {
            if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
                return Err(Error::Config(format!(
                    "co-occurrence window [{lo}, {hi}] is not inside [0, 1]"
                )));
            }
        }
        self.sampler().validate(&self.schedule.build()?)?;
        Ok(())
    }

    /// Base backbone described by the config, without adapters.
    pub fn build_backbone(&self) -> Result<ToyBackbone> {
        let dtype = self.precision.dtype();
        match &self.backbone {
            BackboneSource::Toy { config, weights: None } => ToyBackbone::new(config.clone(), dtype),
            BackboneSource::Toy { config, weights: Some(path) } => {
                let bb = load_backbone(path, dtype)?;
                if bb.config() != config {
                    return Err(Error::Config(format!(
                        "{} holds a backbone configured as {:?}, the run asks for {:?}",
                        path.display(),
                        bb.config(),
                        config
                    )));
                }
                Ok(bb)
            }
            BackboneSource::External { id } => Err(Error::Config(format!(
                "external backbone `{id}` is not available in this build; only the toy backbone is bundled"
            ))),
        }
    }

    pub fn build_encoder(&self) -> Result<ToyTextEncoder> {
        let dim = match &self.backbone {
            BackboneSource::Toy { config, .. } => config.context_dim,
            BackboneSource::External { id } => {
                return Err(Error::Config(format!(
                    "external backbone `{id}` is not available in this build"
                )))
            }
        };
        ToyTextEncoder::new(dim, self.text_seed, self.precision.dtype())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let mut cfg = RunConfig::new(TaskKind::RefInpaint);
        cfg.hyper.prompt_lr = Some(3e-3);
        cfg.data.cooccurrence = Some((0.4, 0.7));
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["hyper"]["learning_rate"] = 1.0.into();
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn task_defaults_fill_unset_fields() {
        let cfg: RunConfig = serde_json::from_str(r#"{"task":"nvs"}"#).unwrap();
        assert_eq!(cfg.sampler().cfg_scale, 2.5);
        assert_eq!(cfg.policy(), TaskKind::Nvs.default_freeze_policy());
        assert_eq!(cfg.prompt_lr(), TaskKind::Nvs.default_prompt_lr());
        cfg.validate().unwrap();
    }

    #[test]
    fn external_backbone_is_refused() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"task":"inpaint","backbone":{"kind":"external","id":"big"}}"#)
                .unwrap();
        assert!(cfg
            .build_backbone()
            .unwrap_err()
            .to_string()
            .contains("big"));
    }
}
