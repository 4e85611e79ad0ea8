//! Batched training steps, the resumable training loop and run directories.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use ctxpaint_core::adapters::FreezePolicy;
use ctxpaint_core::diffusion::{
    draw_training, forward_noise, InpaintContext, LossWeighting, NoiseSchedule, PixelSpace,
};
use ctxpaint_core::pose::RelativePose;
use ctxpaint_core::rng::derive_seed;
use ctxpaint_core::Seed;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::checkpoint::{
    load_adapters, load_backbone, load_prompt, prompt_path, read_tensor_file, save_adapters,
    save_backbone, save_prompt, write_tensor_file,
};
use crate::config::RunConfig;
use crate::data::{
    draw_training_sample, filter_cooccurrence, DrawOptions, Manifest, MaskPolicy, Split,
};
use crate::error::{Error, Result};
use crate::model::{latents_to_nhwc, PromptedModel};
use crate::optim::{AdamW, ParamGroup};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const BACKBONE_FILE: &str = "backbone/backbone.bin";
pub const NAN_BUNDLE: &str = "nan-bundle.json";

/// One sample of a batch: its context, optional pose and noise seed.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub ctx: InpaintContext,
    pub pose: Option<RelativePose>,
    pub seed: Seed,
}

/// Random quantities of one sample, kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DrawInfo {
    pub t: usize,
    pub seed: u64,
    pub dropped: bool,
    pub z_norm: f64,
}

/// Mean over the batch of each sample's noise-prediction error.
///
/// Every sample uses exactly the draws of the scalar training loss under
/// its seed, so the value agrees with it sample by sample.
pub fn batch_loss(
    model: &PromptedModel,
    schedule: &NoiseSchedule,
    items: &[TrainItem],
    cfg_drop_prob: f64,
    weighting: LossWeighting,
) -> Result<(Tensor, Vec<DrawInfo>)> {
    if items.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let dtype = model.dtype();
    let mut stacks = Vec::with_capacity(items.len());
    let mut noises = Vec::with_capacity(items.len());
    let mut ts = Vec::with_capacity(items.len());
    let mut conds = Vec::with_capacity(items.len());
    let mut weights = Vec::new();
    let mut info = Vec::with_capacity(items.len());
    for item in items {
        let ctx = &item.ctx;
        let draw = draw_training(item.seed, schedule, ctx.z0.shape(), cfg_drop_prob)?;
        let z_t = forward_noise(&ctx.z0, &draw.noise, draw.t, schedule)?;
        let (c, h, w) = ctx.z0.shape();
        let mask = &ctx.mask.data()[..h * w];
        let counted = match weighting {
            LossWeighting::All => h * w,
            LossWeighting::Masked => mask.iter().filter(|&&m| m != 0.0).count(),
        };
        if counted == 0 {
            return Err(
                ctxpaint_core::Error::EmptyMask("no positions enter the loss".into()).into(),
            );
        }
        let share = 1.0 / (counted * c) as f64;
        weights.extend(mask.iter().map(|&m| {
            if weighting == LossWeighting::All || m != 0.0 {
                share
            } else {
                0.0
            }
        }));
        info.push(DrawInfo {
            t: draw.t,
            seed: item.seed.0,
            dropped: draw.drop_cond,
            z_norm: z_t.squared_norm().sqrt(),
        });
        stacks.push(ctx.input(&z_t)?);
        noises.push(draw.noise);
        ts.push(draw.t);
        conds.push((item.pose, draw.drop_cond));
    }
    let first = &items[0].ctx.z0;
    let (b, h, w) = (items.len(), first.height(), first.width());
    let x = latents_to_nhwc(&stacks.iter().collect::<Vec<_>>(), dtype)?;
    let eps = latents_to_nhwc(&noises.iter().collect::<Vec<_>>(), dtype)?;
    let weights =
        Tensor::from_vec(weights, (b, h, w, 1), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
    let cond = model.condition_batch(&conds)?;
    let pred = model.forward(&x, &ts, &cond)?;
    let sq = (pred - eps)?.sqr()?;
    let loss = (sq.broadcast_mul(&weights)?.sum_all()? / b as f64)?;
    Ok((loss, info))
}

/// Backbone with adapters and trainability set for the run's policy, plus prompt parameters.
pub fn build_model(config: &RunConfig) -> Result<PromptedModel> {
    let mut backbone = config.build_backbone()?;
    let policy = config.policy();
    if policy.uses_lora() {
        backbone.attach_lora(
            config.hyper.lora_rank,
            derive_seed(config.seed, "lora", 0),
            &|_| true,
        )?;
    }
    backbone.apply_policy(policy)?;
    PromptedModel::new(
        backbone,
        config.build_encoder()?,
        config.task,
        &config.prompt,
    )
}

/// Loads a trained model for inference, checking the backbone fingerprint.
pub fn load_run_model(run_dir: &Path) -> Result<(RunConfig, PromptedModel)> {
    let config = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let bb_path = run_dir.join(BACKBONE_FILE);
    let mut backbone = if bb_path.is_file() {
        load_backbone(&bb_path, config.precision.dtype())?
    } else {
        config.build_backbone()?
    };
    let adapters = run_dir.join("adapters");
    if adapters.join("index.json").is_file() {
        load_adapters(&adapters, &mut backbone)?;
    }
    let file = load_prompt(&prompt_path(&run_dir.join("prompts"), config.task))?;
    let found = backbone.fingerprint()?;
    if file.header.backbone_fingerprint != found {
        return Err(Error::Fingerprint {
            expected: file.header.backbone_fingerprint,
            found,
        });
    }
    if file.header.task_id != config.task {
        return Err(Error::Config(format!(
            "prompt file is for {}, the run config for {}",
            file.header.task_id, config.task
        )));
    }
    let model = PromptedModel::from_entry(
        backbone,
        config.build_encoder()?,
        config.task,
        &file.entry,
        file.pose.as_ref(),
    )?;
    Ok((config, model))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunState {
    step: u64,
    metrics_lines: u64,
}

/// Metrics of one optimiser step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: PromptedModel,
    pub schedule: NoiseSchedule,
    run_dir: PathBuf,
    train: Manifest,
    val: Manifest,
    policy: MaskPolicy,
    draw: DrawOptions,
    opt: AdamW,
    step: u64,
    metrics_lines: u64,
    window: Vec<f64>,
}

impl Trainer {
    /// Starts a fresh run, writing the config snapshot before anything else.
    pub fn new(config: RunConfig, run_dir: &Path) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(run_dir).map_err(Error::io(run_dir))?;
        config.save(&run_dir.join(CONFIG_FILE))?;
        let metrics = run_dir.join(METRICS_FILE);
        fs::write(&metrics, b"").map_err(Error::io(&metrics))?;
        let model = build_model(&config)?;
        let opt = AdamW::new(config.hyper.adamw);
        Self::assemble(config, model, run_dir, opt, 0, 0)
    }

    /// Continues from the last checkpoint of `run_dir`, dropping metrics logged after it.
    pub fn resume(run_dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
        let state_path = run_dir.join(STATE_FILE);
        let text = fs::read_to_string(&state_path).map_err(Error::io(&state_path))?;
        let state: RunState =
            serde_json::from_str(&text).map_err(|e| Error::format(&state_path, e.to_string()))?;
        let mut model = build_model(&config)?;
        let opt_path = run_dir.join(OPTIMIZER_FILE);
        let (_, tensors) = read_tensor_file(&opt_path)?;
        let mut moments = Vec::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("param/prompt/") {
                let store = model.prompt_store_mut();
                let id = store.find(rest).ok_or_else(|| {
                    Error::format(&opt_path, format!("unknown prompt parameter `{rest}`"))
                })?;
                store.set_value(id, &t)?;
            } else if let Some(rest) = name.strip_prefix("param/backbone/") {
                let store = model.backbone.store_mut();
                let id = store.find(rest).ok_or_else(|| {
                    Error::format(&opt_path, format!("unknown backbone parameter `{rest}`"))
                })?;
                store.set_value(id, &t)?;
            } else {
                moments.push((name, t.to_dtype(model.dtype())?));
            }
        }
        let opt = AdamW::restore(config.hyper.adamw, state.step, moments)?;
        let metrics = run_dir.join(METRICS_FILE);
        let text = fs::read_to_string(&metrics).map_err(Error::io(&metrics))?;
        let kept: String = text
            .lines()
            .take(state.metrics_lines as usize)
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(&metrics, kept).map_err(Error::io(&metrics))?;
        log::info!("resumed {} at step {}", run_dir.display(), state.step);
        Self::assemble(config, model, run_dir, opt, state.step, state.metrics_lines)
    }

    fn assemble(
        config: RunConfig,
        model: PromptedModel,
        run_dir: &Path,
        opt: AdamW,
        step: u64,
        metrics_lines: u64,
    ) -> Result<Self> {
        let manifest = Manifest::load(&config.data.manifest)?;
        let train_records: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .cloned()
            .collect();
        let train_records = match config.data.cooccurrence {
            Some((lo, hi)) => filter_cooccurrence(&train_records, lo, hi).0,
            None => train_records,
        };
        if train_records.is_empty() {
            return Err(Error::Config(format!(
                "{} has no usable training records",
                config.data.manifest.display()
            )));
        }
        let train = Manifest::new(manifest.root.clone(), train_records);
        let val = manifest.split(Split::Val);
        let side = {
            let img = train.image(&train.records[0].ref_path)?;
            if img.channels() != model.backbone.config().latent_channels {
                return Err(Error::Config(format!(
                    "images have {} channels, the backbone expects {}",
                    img.channels(),
                    model.backbone.config().latent_channels
                )));
            }
            img.height().min(img.width())
        };
        Ok(Self {
            policy: config.mask_policy(),
            draw: config.draw_options(side),
            schedule: config.schedule.build()?,
            run_dir: run_dir.to_path_buf(),
            config,
            model,
            train,
            val,
            opt,
            step,
            metrics_lines,
            window: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn train_manifest(&self) -> &Manifest {
        &self.train
    }

    fn groups(&self) -> Vec<ParamGroup> {
        let policy = self.config.policy();
        let prompt_lr = self.config.prompt_lr();
        self.model
            .trainable_vars()
            .into_iter()
            .map(|(name, var, is_prompt)| {
                let lr = if is_prompt {
                    prompt_lr
                } else if policy == FreezePolicy::FullFinetune {
                    self.config.hyper.backbone_lr
                } else {
                    self.config.hyper.adapter_lr
                };
                let prefix = if is_prompt { "prompt" } else { "backbone" };
                ParamGroup {
                    name: format!("{prefix}/{name}"),
                    var,
                    lr,
                }
            })
            .collect()
    }

    /// Training items of step `step`, a pure function of the run seed.
    pub fn batch(
        &self,
        manifest: &Manifest,
        step_seed: Seed,
        size: usize,
    ) -> Result<Vec<TrainItem>> {
        (0..size)
            .map(|i| {
                let s = derive_seed(step_seed, "sample", i as u64);
                let drawn = draw_training_sample(
                    manifest,
                    self.config.task,
                    &self.policy,
                    &self.draw,
                    derive_seed(s, "draw", 0),
                )?;
                Ok(TrainItem {
                    ctx: drawn.context(&PixelSpace)?,
                    pose: drawn.stitched.meta.pose().copied(),
                    seed: derive_seed(s, "noise", 0),
                })
            })
            .collect()
    }

    /// One optimiser step; logs and checkpoints on the configured cadence.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step_seed = derive_seed(self.config.seed, "step", self.step);
        let items = self.batch(&self.train, step_seed, self.config.hyper.batch_size)?;
        let h = &self.config.hyper;
        let (loss, info) = batch_loss(
            &self.model,
            &self.schedule,
            &items,
            h.cfg_drop_prob,
            h.loss_weighting,
        )?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(self.halt_non_finite(&info));
        }
        let grads = loss.backward()?;
        let groups = self.groups();
        self.opt.step(&groups, &grads)?;
        self.step += 1;
        self.window.push(value);
        if self.step % self.config.hyper.log_every == 0 {
            self.log_metrics(value)?;
        }
        if self.step % self.config.hyper.checkpoint_every == 0
            || self.step == self.config.hyper.steps
        {
            self.checkpoint()?;
        }
        Ok(StepReport {
            step: self.step,
            loss: value,
        })
    }

    /// Steps until the configured step count.
    pub fn run(&mut self) -> Result<Vec<StepReport>> {
        let mut out = Vec::new();
        while self.step < self.config.hyper.steps {
            out.push(self.train_step()?);
        }
        Ok(out)
    }

    /// Loss on a fixed validation batch (training records if there is no validation split).
    pub fn validation_loss(&self) -> Result<f64> {
        let manifest = if self.val.records.is_empty() {
            &self.train
        } else {
            &self.val
        };
        let items = self.batch(
            manifest,
            derive_seed(self.config.seed, "validation", 0),
            self.config.hyper.eval_batch.max(1),
        )?;
        let (loss, _) = batch_loss(
            &self.model,
            &self.schedule,
            &items,
            0.0,
            self.config.hyper.loss_weighting,
        )?;
        Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    fn log_metrics(&mut self, loss: f64) -> Result<()> {
        let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
        self.window.clear();
        let mut line = Map::new();
        line.insert("step".into(), self.step.into());
        line.insert("loss".into(), loss.into());
        line.insert("loss_mean".into(), mean.into());
        line.insert("lr".into(), self.config.prompt_lr().into());
        let every = self.config.hyper.eval_every;
        if every > 0 && self.step % every == 0 {
            line.insert("val_loss".into(), self.validation_loss()?.into());
        }
        let path = self.run_dir.join(METRICS_FILE);
        let mut f = fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(Error::io(&path))?;
        writeln!(f, "{}", Value::Object(line)).map_err(Error::io(&path))?;
        self.metrics_lines += 1;
        log::info!("step {} loss {loss:.5} (mean {mean:.5})", self.step);
        Ok(())
    }

    /// Writes prompt, adapters, trained base weights, optimiser state, then the step marker.
    pub fn checkpoint(&self) -> Result<()> {
        let dir = &self.run_dir;
        let fp = self.model.backbone.fingerprint()?;
        let prompts = dir.join("prompts");
        fs::create_dir_all(&prompts).map_err(Error::io(&prompts))?;
        save_prompt(&prompt_path(&prompts, self.config.task), &self.model, &fp)?;
        if self.model.backbone.has_lora() {
            let adapters = dir.join("adapters");
            fs::create_dir_all(&adapters).map_err(Error::io(&adapters))?;
            save_adapters(&adapters, &self.model.backbone)?;
        }
        let policy = self.config.policy();
        if matches!(
            policy,
            FreezePolicy::FullFinetune | FreezePolicy::LoraPlusFirstConv
        ) {
            let path = dir.join(BACKBONE_FILE);
            fs::create_dir_all(path.parent().expect("nested path")).map_err(Error::io(dir))?;
            save_backbone(&path, &self.model.backbone)?;
        }
        let mut tensors = self.opt.state();
        for g in self.groups() {
            tensors.push((format!("param/{}", g.name), g.var.as_tensor().clone()));
        }
        let mut meta = Map::new();
        meta.insert("step".into(), self.step.into());
        write_tensor_file(&dir.join(OPTIMIZER_FILE), meta, &tensors)?;
        let state = RunState {
            step: self.step,
            metrics_lines: self.metrics_lines,
        };
        let path = dir.join(STATE_FILE);
        fs::write(&path, serde_json::to_vec(&state).expect("state serialises"))
            .map_err(Error::io(&path))
    }

    fn halt_non_finite(&self, info: &[DrawInfo]) -> Error {
        let bundle = self.run_dir.join(NAN_BUNDLE);
        let worst = info.iter().copied().fold(info[0], |a, b| {
            if b.z_norm > a.z_norm || !b.z_norm.is_finite() {
                b
            } else {
                a
            }
        });
        let body = json!({
            "step": self.step,
            "run_seed": self.config.seed.0,
            "draws": info,
            "config": self.config,
        });
        if let Err(e) = fs::write(
            &bundle,
            serde_json::to_vec_pretty(&body).expect("bundle serialises"),
        ) {
            log::error!("could not write {}: {e}", bundle.display());
        }
        Error::NonFinite {
            step: self.step,
            t: worst.t,
            seed: worst.seed,
            z_norm: worst.z_norm,
            bundle,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyConfig;
    use crate::config::BackboneSource;
    use crate::data::{make_toy_dataset, ToyDataConfig, MANIFEST_FILE};
    use ctxpaint_core::TaskKind;

    fn config(dir: &Path, task: TaskKind) -> RunConfig {
        let cfg = ToyDataConfig {
            views: 3,
            ..ToyDataConfig::default()
        };
        make_toy_dataset(&dir.join("data"), 6, Seed(1), &cfg).unwrap();
        let mut rc = RunConfig::new(task);
        rc.backbone = BackboneSource::Toy {
            config: ToyConfig {
                channels: [8, 8, 8],
                context_dim: 16,
                time_dim: 16,
                groups: 2,
                ..ToyConfig::default()
            },
            weights: None,
        };
        rc.data.manifest = dir.join("data").join(MANIFEST_FILE);
        rc.prompt.rows = Some(4);
        rc.hyper.steps = 6;
        rc.hyper.batch_size = 2;
        rc.hyper.checkpoint_every = 3;
        rc.hyper.log_every = 1;
        rc.hyper.prompt_lr = Some(1e-2);
        rc
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let rc = config(dir.path(), TaskKind::RefInpaint);
        let full = dir.path().join("full");
        Trainer::new(rc.clone(), &full).unwrap().run().unwrap();
        let cut = dir.path().join("cut");
        let mut t = Trainer::new(rc, &cut).unwrap();
        for _ in 0..5 {
            t.train_step().unwrap();
        }
        drop(t);
        let mut t = Trainer::resume(&cut).unwrap();
        assert_eq!(t.step(), 3);
        t.run().unwrap();
        let a = fs::read_to_string(full.join(METRICS_FILE)).unwrap();
        let b = fs::read_to_string(cut.join(METRICS_FILE)).unwrap();
        assert_eq!(a.lines().count(), 6);
        assert_eq!(a, b);
        assert_eq!(
            fs::read(full.join("prompts/ref_inpaint.prompt")).unwrap(),
            fs::read(cut.join("prompts/ref_inpaint.prompt")).unwrap()
        );
    }

    #[test]
    fn prompt_only_leaves_backbone_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let mut rc = config(dir.path(), TaskKind::Nvs);
        rc.policy = Some(FreezePolicy::PromptOnly);
        let mut t = Trainer::new(rc, &dir.path().join("run")).unwrap();
        let before = t.model.backbone.fingerprint().unwrap();
        let prompt_before = t
            .model
            .prompt_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        t.run().unwrap();
        assert_eq!(t.model.backbone.fingerprint().unwrap(), before);
        assert_ne!(
            t.model
                .prompt_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap(),
            prompt_before
        );
        let (_, m) = load_run_model(&dir.path().join("run")).unwrap();
        assert!(m.has_pose());
    }

    #[test]
    fn lora_and_full_runs_checkpoint_their_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut rc = config(dir.path(), TaskKind::Inpaint);
        rc.policy = Some(FreezePolicy::LoraPlusFirstConv);
        rc.hyper.steps = 3;
        Trainer::new(rc.clone(), &dir.path().join("lora"))
            .unwrap()
            .run()
            .unwrap();
        assert!(dir.path().join("lora/adapters/index.json").is_file());
        load_run_model(&dir.path().join("lora")).unwrap();
        rc.policy = Some(FreezePolicy::FullFinetune);
        Trainer::new(rc, &dir.path().join("full"))
            .unwrap()
            .run()
            .unwrap();
        let (_, m) = load_run_model(&dir.path().join("full")).unwrap();
        assert!(!m.backbone.has_lora());
    }
}
