//! Parameter storage and the differentiable building blocks of the toy networks.
//!
//! Activations are kept channel-last (`B×H×W×C`, or `B×N×C` for token
//! sequences) so every layer reduces to a matrix product over the last axis.

use std::collections::HashMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use ctxpaint_core::adapters::ParamRole;
use ctxpaint_core::rng::{fill_standard_normal, seeded_rng};
use ctxpaint_core::Seed;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Base(ParamRole),
    LoraDown,
    LoraUp,
}

#[derive(Debug, Clone)]
enum Value {
    Frozen(Tensor),
    Trainable(Var),
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub slot: Slot,
    value: Value,
}

impl ParamEntry {
    pub fn tensor(&self) -> Tensor {
        match &self.value {
            Value::Frozen(t) => t.clone(),
            Value::Trainable(v) => v.as_tensor().clone(),
        }
    }

    pub fn var(&self) -> Option<&Var> {
        match &self.value {
            Value::Trainable(v) => Some(v),
            Value::Frozen(_) => None,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.value, Value::Trainable(_))
    }

    pub fn elem_count(&self) -> usize {
        match &self.value {
            Value::Frozen(t) => t.elem_count(),
            Value::Trainable(v) => v.elem_count(),
        }
    }
}

/// Ordered, named parameters; frozen entries are plain tensors and
/// trainable ones are variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    entries: Vec<ParamEntry>,
}

pub fn normal_values(seed: Seed, label: &str, n: usize, std: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_standard_normal(&mut seeded_rng(seed, label), &mut v);
    v.iter_mut().for_each(|x| *x *= std);
    v
}

pub fn tensor_from(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        slot: Slot,
        values: Vec<f64>,
        shape: &[usize],
    ) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let t = tensor_from(values, shape, self.dtype)?;
        self.entries.push(ParamEntry {
            name,
            slot,
            value: Value::Frozen(t),
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn add_normal(
        &mut self,
        name: &str,
        slot: Slot,
        shape: &[usize],
        std: f64,
        seed: Seed,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, slot, normal_values(seed, name, n, std), shape)
    }

    pub fn add_const(
        &mut self,
        name: &str,
        slot: Slot,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, slot, vec![value; n], shape)
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        self.entries[id.0].tensor()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) -> Result<()> {
        let e = &mut self.entries[id.0];
        e.value = match (&e.value, trainable) {
            (Value::Frozen(t), true) => Value::Trainable(Var::from_tensor(t)?),
            (Value::Trainable(v), false) => Value::Frozen(v.as_tensor().detach()),
            (v, _) => v.clone(),
        };
        Ok(())
    }

    /// Overwrites a value, keeping its trainability.
    pub fn set_value(&mut self, id: ParamId, value: &Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        let cur = e.tensor();
        if cur.dims() != value.dims() {
            return Err(Error::Config(format!(
                "`{}` has shape {:?}, got {:?}",
                e.name,
                cur.dims(),
                value.dims()
            )));
        }
        let value = value.to_dtype(self.dtype)?.detach();
        match &e.value {
            Value::Frozen(_) => e.value = Value::Frozen(value),
            Value::Trainable(v) => v.set(&value)?,
        }
        Ok(())
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter_map(|e| e.var().map(|v| (e.name.clone(), v.clone())))
            .collect()
    }

    /// SHA-256 over names, shapes and raw values of the selected entries, in store order.
    pub fn digest(&self, select: impl Fn(&ParamEntry) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| select(e)) {
            h.update(e.name.as_bytes());
            h.update([0u8]);
            let t = e.tensor();
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            match self.dtype {
                DType::F64 => t
                    .flatten_all()?
                    .to_vec1::<f64>()?
                    .iter()
                    .for_each(|v| h.update(v.to_le_bytes())),
                _ => t
                    .flatten_all()?
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .for_each(|v| h.update(v.to_le_bytes())),
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Gather indices memoised per input geometry.
#[derive(Debug)]
struct IndexCache<K>(Mutex<HashMap<K, (Tensor, usize, usize)>>);

impl<K> Default for IndexCache<K> {
    fn default() -> Self {
        Self(Mutex::new(HashMap::new()))
    }
}

impl<K> Clone for IndexCache<K> {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl<K: std::hash::Hash + Eq> IndexCache<K> {
    fn get(
        &self,
        key: K,
        build: impl FnOnce() -> (Vec<u32>, usize, usize),
    ) -> Result<(Tensor, usize, usize)> {
        let mut map = self.0.lock().expect("index cache poisoned");
        if let Some(v) = map.get(&key) {
            return Ok(v.clone());
        }
        let (idx, a, b) = build();
        let n = idx.len();
        let v = (Tensor::from_vec(idx, n, &Device::Cpu)?, a, b);
        map.insert(key, v.clone());
        Ok(v)
    }
}

/// 3×3 convolution with zero padding 1, as a gather of patches and one matrix product.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    cache: IndexCache<(usize, usize, usize)>,
}

impl Conv3x3 {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        role: ParamRole,
        seed: Seed,
        gain: f64,
    ) -> Result<Self> {
        let std = gain / ((9 * c_in) as f64).sqrt();
        let weight = store.add_normal(
            &format!("{name}.weight"),
            Slot::Base(role),
            &[9 * c_in, c_out],
            std,
            seed,
        )?;
        let bias = store.add_const(&format!("{name}.bias"), Slot::Base(role), &[c_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            c_in,
            c_out,
            stride,
            cache: IndexCache::default(),
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.c_in {
            return Err(Error::Config(format!(
                "conv expects {} channels, got {c}",
                self.c_in
            )));
        }
        let stride = self.stride;
        let (idx, ho, wo) = self.cache.get((b, h, w), || {
            let (hp, wp) = (h + 2, w + 2);
            let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
            let mut idx = Vec::with_capacity(b * ho * wo * 9);
            for bi in 0..b {
                for y in 0..ho {
                    for xx in 0..wo {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                idx.push(
                                    (bi * hp * wp + (y * stride + ky) * wp + xx * stride + kx)
                                        as u32,
                                );
                            }
                        }
                    }
                }
            }
            (idx, ho, wo)
        })?;
        let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let flat = padded.reshape((b * (h + 2) * (w + 2), c))?;
        let cols = flat.index_select(&idx, 0)?.reshape((b * ho * wo, 9 * c))?;
        let y = cols
            .matmul(&store.get(self.weight))?
            .broadcast_add(&store.get(self.bias))?;
        Ok(y.reshape((b, ho, wo, self.c_out))?)
    }
}

/// Nearest-neighbour resize of a `B×H×W×C` tensor.
#[derive(Debug, Clone, Default)]
pub struct Resize {
    cache: IndexCache<(usize, usize, usize, usize, usize)>,
}

impl Resize {
    pub fn forward(&self, x: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let (idx, _, _) = self.cache.get((b, h, w, ho, wo), || {
            let mut idx = Vec::with_capacity(b * ho * wo);
            for bi in 0..b {
                for y in 0..ho {
                    for xx in 0..wo {
                        idx.push((bi * h * w + (y * h / ho) * w + xx * w / wo) as u32);
                    }
                }
            }
            (idx, ho, wo)
        })?;
        Ok(x.reshape((b * h * w, c))?
            .index_select(&idx, 0)?
            .reshape((b, ho, wo, c))?)
    }
}

/// Low-rank factors beside a frozen projection: `ΔW = scale · A·B` with
/// `A: d_in×r`, `B: r×d_out`.
#[derive(Debug, Clone)]
pub struct LoraFactors {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// `x·W + b`, optionally with a low-rank adapter.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraFactors>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        role: ParamRole,
        seed: Seed,
        gain: f64,
    ) -> Result<Self> {
        let weight = store.add_normal(
            &format!("{name}.weight"),
            Slot::Base(role),
            &[d_in, d_out],
            gain / (d_in as f64).sqrt(),
            seed,
        )?;
        let bias_role = if matches!(role, ParamRole::AttentionProjection { .. }) {
            ParamRole::Backbone
        } else {
            role
        };
        let bias = if bias {
            Some(store.add_const(
                &format!("{name}.bias"),
                Slot::Base(bias_role),
                &[d_out],
                0.0,
            )?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            d_in,
            d_out,
            lora: None,
        })
    }

    /// Attaches zero-initialised factors (`A ~ N(0, 0.02²)`, `B = 0`).
    pub fn attach_lora(&mut self, store: &mut ParamStore, rank: usize, seed: Seed) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Config(format!(
                "`{}` already carries an adapter",
                self.name
            )));
        }
        if rank == 0 || rank > self.d_in.min(self.d_out) {
            return Err(ctxpaint_core::Error::InvalidValue(format!(
                "rank {rank} must lie in 1..={} for `{}`",
                self.d_in.min(self.d_out),
                self.name
            ))
            .into());
        }
        let down = store.add_normal(
            &format!("{}.lora_down", self.name),
            Slot::LoraDown,
            &[self.d_in, rank],
            0.02,
            seed,
        )?;
        let up = store.add_const(
            &format!("{}.lora_up", self.name),
            Slot::LoraUp,
            &[rank, self.d_out],
            0.0,
        )?;
        self.lora = Some(LoraFactors {
            down,
            up,
            rank,
            scale: 1.0,
        });
        Ok(())
    }

    /// `W + scale·A·B`
    pub fn effective_weight(&self, store: &ParamStore) -> Result<Tensor> {
        let w = store.get(self.weight);
        Ok(match &self.lora {
            None => w,
            Some(l) => (w + (store.get(l.down).matmul(&store.get(l.up))? * l.scale)?)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let n: usize = dims[..dims.len() - 1].iter().product();
        let x2 = x.reshape((n, self.d_in))?;
        let mut y = x2.matmul(&store.get(self.weight))?;
        if let Some(l) = &self.lora {
            let low = x2.matmul(&store.get(l.down))?.matmul(&store.get(l.up))?;
            y = (y + (low * l.scale)?)?;
        }
        if let Some(b) = self.bias {
            y = y.broadcast_add(&store.get(b))?;
        }
        let mut out = dims;
        *out.last_mut().expect("non-scalar input") = self.d_out;
        Ok(y.reshape(out)?)
    }
}

/// Group normalisation over the last axis of `B×…×C`, statistics shared by
/// all positions of a sample.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        groups: usize,
        channels: usize,
        role: ParamRole,
    ) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels do not split into {groups} groups"
            )));
        }
        let gamma =
            store.add_const(&format!("{name}.gamma"), Slot::Base(role), &[channels], 1.0)?;
        let beta = store.add_const(&format!("{name}.beta"), Slot::Base(role), &[channels], 0.0)?;
        Ok(Self {
            groups,
            channels,
            gamma,
            beta,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let b = dims[0];
        let n: usize = dims[1..dims.len() - 1].iter().product();
        let g = x.reshape((b, n, self.groups, self.channels / self.groups))?;
        let mean = g.mean_keepdim((1, 3))?;
        let centred = g.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim((1, 3))?;
        let normed = centred
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .reshape(dims)?;
        Ok(normed
            .broadcast_mul(&store.get(self.gamma))?
            .broadcast_add(&store.get(self.beta))?)
    }
}

/// Layer normalisation over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        role: ParamRole,
    ) -> Result<Self> {
        let gamma =
            store.add_const(&format!("{name}.gamma"), Slot::Base(role), &[channels], 1.0)?;
        let beta = store.add_const(&format!("{name}.beta"), Slot::Base(role), &[channels], 0.0)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&store.get(self.gamma))?
            .broadcast_add(&store.get(self.beta))?)
    }
}

/// Single-head scaled dot-product attention of `q: B×N×C` over `k, v: B×M×C`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let scale = 1.0 / (q.dim(D::Minus1)? as f64).sqrt();
    let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * scale)?;
    Ok(softmax_last(&scores)?.matmul(v)?)
}

/// Sinusoidal features of integer timesteps, `B×dim`.
pub fn timestep_features(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((step as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((step as f64 * freq).cos());
        }
    }
    tensor_from(v, &[t.len(), dim], dtype)
}
