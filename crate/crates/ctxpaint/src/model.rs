//! A backbone, a frozen text encoder and one task's prompt parameters,
//! exposed as a [`Denoiser`].

use candle_core::{DType, Tensor, Var};
use ctxpaint_core::adapters::ParamRole;
use ctxpaint_core::diffusion::{Denoiser, Latent};
use ctxpaint_core::linalg::Matrix;
use ctxpaint_core::pose::{encode_pose, PoseProjector, RelativePose};
use ctxpaint_core::prompts::{
    DeepPromptSet, Embeddings, InitMode, PromptEntry, PromptTable, ToyVocabulary,
};
use ctxpaint_core::rng::derive_seed;
use ctxpaint_core::{Seed, TaskKind};

use crate::backbone::{ProbeCapture, ToyBackbone};
use crate::error::{Error, Result};
use crate::nn::{tensor_from, ParamId, ParamStore, Slot};
use crate::text::ToyTextEncoder;

/// How a task's prompt parameters are created.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSpec {
    /// Trainable rows; `None` takes the task default.
    pub rows: Option<usize>,
    pub init_mode: InitMode,
    /// Rows per cross-attention layer; 0 disables deep prompts.
    pub deep_length: usize,
    /// Whether the null embedding is learned alongside the prompt.
    pub cfg_training: bool,
    pub seed: Seed,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            rows: None,
            init_mode: InitMode::TokenAvgs,
            deep_length: 0,
            cfg_training: false,
            seed: Seed(0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PoseIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct PromptedModel {
    pub backbone: ToyBackbone,
    pub encoder: ToyTextEncoder,
    task: TaskKind,
    init_mode: InitMode,
    store: ParamStore,
    prompt: ParamId,
    null: ParamId,
    pose: Option<PoseIds>,
    deep: Vec<ParamId>,
}

fn tensor_embeddings(t: &Tensor) -> Result<Embeddings> {
    let (r, d) = t.dims2()?;
    Ok(Embeddings::new(
        r,
        d,
        t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
    )?)
}

fn matrix_of(t: &Tensor) -> Result<Matrix> {
    let (r, c) = t.dims2()?;
    Ok(Matrix::from_vec(
        r,
        c,
        t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
    )?)
}

impl PromptedModel {
    /// Fresh prompt parameters for `task`, initialised from its description.
    pub fn new(
        backbone: ToyBackbone,
        encoder: ToyTextEncoder,
        task: TaskKind,
        spec: &PromptSpec,
    ) -> Result<Self> {
        let dim = encoder.dim();
        let mut table = PromptTable::new();
        let rows = spec.rows.unwrap_or(task.default_prompt_rows());
        table.init_task(
            task,
            rows,
            &ToyVocabulary::new(dim, spec.seed),
            spec.init_mode,
            spec.seed,
        )?;
        let mut entry = table.get(task)?.clone();
        if spec.deep_length > 0 {
            entry.deep = DeepPromptSet::init(
                backbone.cross_attention_layers(),
                spec.deep_length,
                dim,
                spec.seed,
            )?;
        }
        let pose = (task == TaskKind::Nvs)
            .then(|| PoseProjector::init(dim, dim, derive_seed(spec.seed, "pose", 0)));
        let mut model = Self::from_entry(backbone, encoder, task, &entry, pose.as_ref())?;
        model.set_cfg_training(spec.cfg_training)?;
        Ok(model)
    }

    /// Rebuilds the model around stored prompt parameters.
    pub fn from_entry(
        backbone: ToyBackbone,
        encoder: ToyTextEncoder,
        task: TaskKind,
        entry: &PromptEntry,
        pose: Option<&PoseProjector>,
    ) -> Result<Self> {
        let dim = encoder.dim();
        if entry.prompt.dim() != dim || backbone.config().context_dim != dim {
            return Err(ctxpaint_core::Error::Shape(format!(
                "prompt dim {} vs encoder dim {dim} vs backbone context dim {}",
                entry.prompt.dim(),
                backbone.config().context_dim
            ))
            .into());
        }
        let dtype = backbone.dtype();
        let role = Slot::Base(ParamRole::Conditioning);
        let mut store = ParamStore::new(dtype);
        let prompt = store.add(
            "prompt",
            role,
            entry.prompt.data().iter().map(|&v| f64::from(v)).collect(),
            &[entry.prompt.rows(), dim],
        )?;
        let null = store.add(
            "null",
            role,
            entry.null_embedding.iter().map(|&v| f64::from(v)).collect(),
            &[dim],
        )?;
        let pose = match pose {
            Some(p) => {
                if p.output_dim() != dim {
                    return Err(ctxpaint_core::Error::Shape(format!(
                        "pose projector emits {} values for dim {dim}",
                        p.output_dim()
                    ))
                    .into());
                }
                let h = p.hidden_dim();
                Some(PoseIds {
                    w1: store.add("pose.w1", role, p.w1.transpose().into_data(), &[4, h])?,
                    b1: store.add("pose.b1", role, p.b1.clone(), &[h])?,
                    w2: store.add("pose.w2", role, p.w2.transpose().into_data(), &[h, dim])?,
                    b2: store.add("pose.b2", role, p.b2.clone(), &[dim])?,
                })
            }
            None => None,
        };
        let mut deep = Vec::new();
        if entry.deep.is_enabled() {
            if entry.deep.layer_count() != backbone.cross_attention_layers() {
                return Err(ctxpaint_core::Error::MissingLayer {
                    index: entry.deep.layer_count(),
                    count: backbone.cross_attention_layers(),
                }
                .into());
            }
            for (i, layer) in entry.deep.layers().iter().enumerate() {
                let vals = layer.data().iter().map(|&v| f64::from(v)).collect();
                deep.push(store.add(format!("deep.{i}"), role, vals, &[layer.rows(), dim])?);
            }
        }
        let mut model = Self {
            backbone,
            encoder,
            task,
            init_mode: entry.init_mode,
            store,
            prompt,
            null,
            pose,
            deep,
        };
        for id in model.store.ids().collect::<Vec<_>>() {
            let on = id != model.null;
            model.store.set_trainable(id, on)?;
        }
        Ok(model)
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn dtype(&self) -> DType {
        self.backbone.dtype()
    }

    pub fn prompt_store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prompt_store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn prompt_var(&self) -> Option<Var> {
        self.store.entry(self.prompt).var().cloned()
    }

    pub fn prompt_tensor(&self) -> Tensor {
        self.store.get(self.prompt)
    }

    /// Learns the null embedding too when set.
    pub fn set_cfg_training(&mut self, on: bool) -> Result<()> {
        self.store.set_trainable(self.null, on)
    }

    pub fn has_pose(&self) -> bool {
        self.pose.is_some()
    }

    /// Trainable scalars on the prompt side.
    pub fn prompt_trainable_count(&self) -> usize {
        self.store
            .entries()
            .iter()
            .filter(|e| e.is_trainable())
            .map(|e| e.elem_count())
            .sum()
    }

    /// Every trainable variable of the model, named and tagged with whether it is a prompt-side parameter.
    pub fn trainable_vars(&self) -> Vec<(String, Var, bool)> {
        let mut out: Vec<_> = self
            .store
            .trainable()
            .into_iter()
            .map(|(n, v)| (n, v, true))
            .collect();
        out.extend(
            self.backbone
                .store()
                .trainable()
                .into_iter()
                .map(|(n, v)| (n, v, false)),
        );
        out
    }

    pub fn prompt_entry(&self) -> Result<PromptEntry> {
        let prompt = tensor_embeddings(&self.store.get(self.prompt))?;
        let null = self
            .store
            .get(self.null)
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?;
        let layers = self
            .deep
            .iter()
            .map(|&id| tensor_embeddings(&self.store.get(id)))
            .collect::<Result<Vec<_>>>()?;
        let dim = prompt.dim();
        Ok(PromptEntry {
            prompt,
            null_embedding: null,
            init_mode: self.init_mode,
            deep: DeepPromptSet::from_layers(dim, layers)?,
        })
    }

    pub fn pose_projector(&self) -> Result<Option<PoseProjector>> {
        let Some(ids) = self.pose else {
            return Ok(None);
        };
        let vec = |id| -> Result<Vec<f64>> {
            Ok(self.store.get(id).to_dtype(DType::F64)?.to_vec1::<f64>()?)
        };
        Ok(Some(PoseProjector {
            w1: matrix_of(&self.store.get(ids.w1))?.transpose(),
            b1: vec(ids.b1)?,
            w2: matrix_of(&self.store.get(ids.w2))?.transpose(),
            b2: vec(ids.b2)?,
        }))
    }

    fn pose_token(&self, ids: PoseIds, pose: &RelativePose) -> Result<Tensor> {
        let f = encode_pose(pose)?;
        let p = &self.store;
        let x = tensor_from(f.0.to_vec(), &[1, 4], self.dtype())?;
        let h = x
            .matmul(&p.get(ids.w1))?
            .broadcast_add(&p.get(ids.b1))?
            .silu()?;
        Ok(h.matmul(&p.get(ids.w2))?.broadcast_add(&p.get(ids.b2))?)
    }

    /// Pre-encoder sequence `S×D`: prompt rows then the pose token, or the null row repeated.
    pub fn tokens(&self, pose: Option<&RelativePose>, null: bool) -> Result<Tensor> {
        let prompt = self.store.get(self.prompt);
        let seq = match (self.pose, pose) {
            (Some(ids), Some(p)) => Tensor::cat(&[&prompt, &self.pose_token(ids, p)?], 0)?,
            (Some(_), None) => {
                return Err(Error::Config(format!(
                    "{} conditioning needs a relative pose",
                    self.task
                )))
            }
            (None, _) => prompt,
        };
        if null {
            let (s, d) = seq.dims2()?;
            return Ok(self
                .store
                .get(self.null)
                .unsqueeze(0)?
                .broadcast_as((s, d))?
                .contiguous()?);
        }
        Ok(seq)
    }

    /// Encoded conditioning for a batch, `B×S×D`.
    pub fn condition_batch(&self, items: &[(Option<RelativePose>, bool)]) -> Result<Tensor> {
        let seqs = items
            .iter()
            .map(|(p, n)| self.tokens(p.as_ref(), *n))
            .collect::<Result<Vec<_>>>()?;
        self.encoder.forward(&Tensor::stack(&seqs, 0)?)
    }

    /// Encoded conditioning for one sample, `1×S×D`.
    pub fn condition(&self, pose: Option<&RelativePose>, null: bool) -> Result<Tensor> {
        self.condition_batch(&[(pose.copied(), null)])
    }

    fn deep_rows(&self) -> Option<Vec<Tensor>> {
        (!self.deep.is_empty()).then(|| self.deep.iter().map(|&id| self.store.get(id)).collect())
    }

    /// Batched noise prediction on channel-last inputs.
    pub fn forward(&self, x: &Tensor, t: &[usize], ctx: &Tensor) -> Result<Tensor> {
        self.backbone
            .forward(x, t, ctx, self.deep_rows().as_deref())
    }

    pub fn forward_probed(
        &self,
        x: &Tensor,
        t: &[usize],
        ctx: &Tensor,
        probes: &mut Vec<ProbeCapture>,
    ) -> Result<Tensor> {
        self.backbone
            .forward_probed(x, t, ctx, self.deep_rows().as_deref(), Some(probes))
    }

    /// [`Denoiser::predict_noise`] that also records self-attention inputs.
    pub fn predict_noise_probed(
        &self,
        stack: &Latent,
        t: usize,
        cond: &Tensor,
        probes: &mut Vec<ProbeCapture>,
    ) -> Result<Latent> {
        let x = latents_to_nhwc(&[stack], self.dtype())?;
        let y = self.forward_probed(&x, &[t], cond, probes)?;
        Ok(nhwc_to_latents(&y)?.remove(0))
    }
}

/// Stacks `C×H×W` latents into a `B×H×W×C` tensor.
pub fn latents_to_nhwc(latents: &[&Latent], dtype: DType) -> Result<Tensor> {
    let (c, h, w) = latents
        .first()
        .map(|l| l.shape())
        .ok_or_else(|| Error::Config("empty latent batch".into()))?;
    let mut v = Vec::with_capacity(latents.len() * c * h * w);
    for l in latents {
        if l.shape() != (c, h, w) {
            return Err(ctxpaint_core::Error::Shape(
                "latents of different shapes in one batch".into(),
            )
            .into());
        }
        let d = l.data();
        for i in 0..h * w {
            for ch in 0..c {
                v.push(d[ch * h * w + i]);
            }
        }
    }
    tensor_from(v, &[latents.len(), h, w, c], dtype)
}

pub fn nhwc_to_latents(t: &Tensor) -> Result<Vec<Latent>> {
    let (b, h, w, c) = t.dims4()?;
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    (0..b)
        .map(|bi| {
            let src = &flat[bi * h * w * c..(bi + 1) * h * w * c];
            let mut data = vec![0.0; c * h * w];
            for i in 0..h * w {
                for ch in 0..c {
                    data[ch * h * w + i] = src[i * c + ch];
                }
            }
            Ok(Latent::new(c, h, w, data)?)
        })
        .collect()
}

impl Denoiser for PromptedModel {
    type Cond = Tensor;

    fn predict_noise(
        &self,
        stack: &Latent,
        t: usize,
        cond: &Tensor,
    ) -> ctxpaint_core::Result<Latent> {
        let run = || -> Result<Latent> {
            let x = latents_to_nhwc(&[stack], self.dtype())?;
            Ok(nhwc_to_latents(&self.forward(&x, &[t], cond)?)?.remove(0))
        };
        run().map_err(Into::into)
    }
}
