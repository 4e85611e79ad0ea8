//! On-disk formats: tensor files, prompt files, adapter sets and backbone weights.
//!
//! A tensor file is a little-endian `u32` header length, a JSON header, then
//! the raw little-endian values of every listed tensor in order.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ctxpaint_core::adapters::LoraAdapter;
use ctxpaint_core::linalg::Matrix;
use ctxpaint_core::pose::PoseProjector;
use ctxpaint_core::prompts::{DeepPromptSet, Embeddings, InitMode, PromptEntry};
use ctxpaint_core::TaskKind;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backbone::{ToyBackbone, ToyConfig};
use crate::error::{Error, Result};
use crate::model::PromptedModel;
use crate::nn::Slot;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Config(format!("cannot store {other:?} tensors"))),
    }
}

/// Writes `tensors` after a JSON header made of `meta` plus a `tensors` listing.
pub fn write_tensor_file(
    path: &Path,
    meta: Map<String, Value>,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let mut header = meta;
    let mut infos = Vec::with_capacity(tensors.len());
    let mut body = Vec::new();
    for (name, t) in tensors {
        let dtype = dtype_name(t.dtype())?;
        infos.push(TensorInfo {
            name: name.clone(),
            shape: t.dims().to_vec(),
            dtype: dtype.into(),
        });
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => flat
                .to_vec1::<f64>()?
                .iter()
                .for_each(|v| body.extend_from_slice(&v.to_le_bytes())),
            _ => flat
                .to_vec1::<f32>()?
                .iter()
                .for_each(|v| body.extend_from_slice(&v.to_le_bytes())),
        }
    }
    header.insert(
        "tensors".into(),
        serde_json::to_value(&infos).expect("tensor infos serialise"),
    );
    let json = serde_json::to_vec(&Value::Object(header)).expect("header serialises");
    let mut bytes = Vec::with_capacity(4 + json.len() + body.len());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&body);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, bytes).map_err(Error::io(path))
}

/// Reads a tensor file; the returned header still carries the `tensors` listing.
pub fn read_tensor_file(path: &Path) -> Result<(Map<String, Value>, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.len() < 4 {
        return Err(Error::format(path, "truncated header length"));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().expect("four bytes")) as usize;
    let json = bytes
        .get(4..4 + n)
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Map<String, Value> = serde_json::from_slice(json)
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let infos: Vec<TensorInfo> = header
        .get("tensors")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::format(path, format!("bad tensor listing: {e}")))?
        .ok_or_else(|| Error::format(path, "header lacks a tensor listing"))?;
    let mut pos = 4 + n;
    let mut out = Vec::with_capacity(infos.len());
    for info in infos {
        let count: usize = info.shape.iter().product();
        let width = match info.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => {
                return Err(Error::format(
                    path,
                    format!("unknown dtype `{other}` for `{}`", info.name),
                ))
            }
        };
        let raw = bytes
            .get(pos..pos + count * width)
            .ok_or_else(|| Error::format(path, format!("data for `{}` is truncated", info.name)))?;
        pos += count * width;
        let t = if width == 4 {
            let v: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, info.shape.as_slice(), &Device::Cpu)?
        } else {
            let v: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, info.shape.as_slice(), &Device::Cpu)?
        };
        out.push((info.name, t));
    }
    if pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes", bytes.len() - pos),
        ));
    }
    Ok((header, out))
}

fn header_field<T: for<'de> Deserialize<'de>>(
    path: &Path,
    header: &Map<String, Value>,
    key: &str,
) -> Result<T> {
    let v = header
        .get(key)
        .ok_or_else(|| Error::format(path, format!("header lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::format(path, format!("bad `{key}`: {e}")))
}

fn take(path: &Path, tensors: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))?;
    Ok(tensors.remove(i).1)
}

fn f32_values(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

fn f64_values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Header fields of a prompt file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptHeader {
    pub format: u32,
    pub task_id: TaskKind,
    #[serde(rename = "L")]
    pub length: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub init_mode: InitMode,
    pub backbone_fingerprint: String,
}

/// Everything a prompt file restores.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptFile {
    pub header: PromptHeader,
    pub entry: PromptEntry,
    pub pose: Option<PoseProjector>,
}

pub fn prompt_path(dir: &Path, task: TaskKind) -> PathBuf {
    dir.join(format!("{}.prompt", task.as_str()))
}

/// Stores the task prompt rows first, then the null row, pose projector and deep layers, all as 32-bit floats.
pub fn save_prompt(path: &Path, model: &PromptedModel, backbone_fingerprint: &str) -> Result<()> {
    let entry = model.prompt_entry()?;
    let header = PromptHeader {
        format: FORMAT_VERSION,
        task_id: model.task(),
        length: entry.prompt.rows(),
        dim: entry.prompt.dim(),
        init_mode: entry.init_mode,
        backbone_fingerprint: backbone_fingerprint.to_string(),
    };
    let f32t = |t: Tensor| t.to_dtype(DType::F32);
    let mut tensors = vec![("prompt".to_string(), f32t(model.prompt_tensor())?)];
    for e in model.prompt_store().entries() {
        if e.name != "prompt" {
            tensors.push((e.name.clone(), f32t(e.tensor())?));
        }
    }
    let Value::Object(meta) = serde_json::to_value(&header).expect("header serialises") else {
        unreachable!()
    };
    write_tensor_file(path, meta, &tensors)
}

pub fn load_prompt(path: &Path) -> Result<PromptFile> {
    let (raw, mut tensors) = read_tensor_file(path)?;
    let header = PromptHeader {
        format: header_field(path, &raw, "format")?,
        task_id: header_field::<String>(path, &raw, "task_id")?.parse()?,
        length: header_field(path, &raw, "L")?,
        dim: header_field(path, &raw, "D")?,
        init_mode: header_field(path, &raw, "init_mode")?,
        backbone_fingerprint: header_field(path, &raw, "backbone_fingerprint")?,
    };
    if header.format != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("format {} is not {FORMAT_VERSION}", header.format),
        ));
    }
    let prompt = take(path, &mut tensors, "prompt")?;
    if prompt.dims() != [header.length, header.dim] {
        return Err(Error::format(
            path,
            format!(
                "prompt of shape {:?} under L={} D={}",
                prompt.dims(),
                header.length,
                header.dim
            ),
        ));
    }
    let prompt = Embeddings::new(header.length, header.dim, f32_values(&prompt)?)?;
    let null = f32_values(&take(path, &mut tensors, "null")?)?;
    let pose = if tensors.iter().any(|(n, _)| n.starts_with("pose.")) {
        let w1 = take(path, &mut tensors, "pose.w1")?;
        let w2 = take(path, &mut tensors, "pose.w2")?;
        let (d1, h) = w1.dims2()?;
        let (h2, d) = w2.dims2()?;
        Some(PoseProjector {
            w1: Matrix::from_vec(d1, h, f64_values(&w1)?)?.transpose(),
            b1: f64_values(&take(path, &mut tensors, "pose.b1")?)?,
            w2: Matrix::from_vec(h2, d, f64_values(&w2)?)?.transpose(),
            b2: f64_values(&take(path, &mut tensors, "pose.b2")?)?,
        })
    } else {
        None
    };
    let mut layers = Vec::new();
    while let Ok(t) = take(path, &mut tensors, &format!("deep.{}", layers.len())) {
        let (r, d) = t.dims2()?;
        layers.push(Embeddings::new(r, d, f32_values(&t)?)?);
    }
    if let Some((name, _)) = tensors.first() {
        return Err(Error::format(path, format!("unexpected tensor `{name}`")));
    }
    let entry = PromptEntry {
        prompt,
        null_embedding: null,
        init_mode: header.init_mode,
        deep: DeepPromptSet::from_layers(header.dim, layers)?,
    };
    Ok(PromptFile {
        header,
        entry,
        pose,
    })
}

/// One adapter site as listed in the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSite {
    pub site: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterIndex {
    pub format: u32,
    pub backbone_fingerprint: String,
    pub weights: String,
    pub sites: Vec<AdapterSite>,
}

/// Adapters of the backbone in `A: r×d_in`, `B: d_out×r` orientation.
pub fn export_adapters(backbone: &ToyBackbone) -> Result<Vec<LoraAdapter>> {
    let store = backbone.store();
    let mut out = Vec::new();
    for lin in backbone.attention_projections() {
        if let Some(l) = &lin.lora {
            let down = store.get(l.down).t()?;
            let up = store.get(l.up).t()?;
            out.push(LoraAdapter {
                site: lin.name.clone(),
                rank: l.rank,
                down: Matrix::from_vec(l.rank, lin.d_in, f64_values(&down)?)?,
                up: Matrix::from_vec(lin.d_out, l.rank, f64_values(&up)?)?,
                scale: l.scale,
            });
        }
    }
    Ok(out)
}

pub fn save_adapters(dir: &Path, backbone: &ToyBackbone) -> Result<()> {
    let store = backbone.store();
    let mut sites = Vec::new();
    let mut tensors = Vec::new();
    for lin in backbone.attention_projections() {
        if let Some(l) = &lin.lora {
            sites.push(AdapterSite {
                site: lin.name.clone(),
                d_in: lin.d_in,
                d_out: lin.d_out,
                rank: l.rank,
                scale: l.scale,
            });
            tensors.push((
                format!("{}.A", lin.name),
                store.get(l.down).t()?.contiguous()?,
            ));
            tensors.push((
                format!("{}.B", lin.name),
                store.get(l.up).t()?.contiguous()?,
            ));
        }
    }
    let index = AdapterIndex {
        format: FORMAT_VERSION,
        backbone_fingerprint: backbone.fingerprint()?,
        weights: "adapters.bin".into(),
        sites,
    };
    write_tensor_file(&dir.join(&index.weights), Map::new(), &tensors)?;
    let json = serde_json::to_string_pretty(&index).expect("index serialises");
    fs::write(dir.join("index.json"), json).map_err(Error::io(dir.join("index.json")))
}

/// Attaches the stored adapters to `backbone` and loads their factors.
pub fn load_adapters(dir: &Path, backbone: &mut ToyBackbone) -> Result<AdapterIndex> {
    let index_path = dir.join("index.json");
    let text = fs::read_to_string(&index_path).map_err(Error::io(&index_path))?;
    let index: AdapterIndex =
        serde_json::from_str(&text).map_err(|e| Error::format(&index_path, e.to_string()))?;
    let found = backbone.fingerprint()?;
    if index.backbone_fingerprint != found {
        return Err(Error::Fingerprint {
            expected: index.backbone_fingerprint,
            found,
        });
    }
    let weights_path = dir.join(&index.weights);
    let (_, mut tensors) = read_tensor_file(&weights_path)?;
    let ranks: std::collections::BTreeMap<&str, usize> = index
        .sites
        .iter()
        .map(|s| (s.site.as_str(), s.rank))
        .collect();
    let known: Vec<String> = backbone
        .attention_projections()
        .iter()
        .map(|l| l.name.clone())
        .collect();
    if let Some(bad) = index.sites.iter().find(|s| !known.contains(&s.site)) {
        return Err(Error::format(
            &index_path,
            format!("backbone has no projection `{}`", bad.site),
        ));
    }
    for (&site, &rank) in &ranks {
        backbone.attach_lora(rank, ctxpaint_core::Seed(0), &|name| name == site)?;
    }
    let dtype = backbone.dtype();
    for s in &index.sites {
        let a = take(&weights_path, &mut tensors, &format!("{}.A", s.site))?;
        let b = take(&weights_path, &mut tensors, &format!("{}.B", s.site))?;
        let store = backbone.store_mut();
        let down = store
            .find(&format!("{}.lora_down", s.site))
            .expect("just attached");
        let up = store
            .find(&format!("{}.lora_up", s.site))
            .expect("just attached");
        store.set_value(down, &a.t()?.to_dtype(dtype)?)?;
        store.set_value(up, &b.t()?.to_dtype(dtype)?)?;
    }
    Ok(index)
}

/// Base weights with the configuration needed to rebuild the backbone.
pub fn save_backbone(path: &Path, backbone: &ToyBackbone) -> Result<()> {
    let mut meta = Map::new();
    meta.insert("format".into(), FORMAT_VERSION.into());
    meta.insert(
        "config".into(),
        serde_json::to_value(backbone.config()).expect("config serialises"),
    );
    meta.insert("fingerprint".into(), backbone.fingerprint()?.into());
    let tensors: Vec<_> = backbone
        .store()
        .entries()
        .iter()
        .filter(|e| matches!(e.slot, Slot::Base(_)))
        .map(|e| (e.name.clone(), e.tensor()))
        .collect();
    write_tensor_file(path, meta, &tensors)
}

pub fn load_backbone(path: &Path, dtype: DType) -> Result<ToyBackbone> {
    let (header, tensors) = read_tensor_file(path)?;
    let config: ToyConfig = header_field(path, &header, "config")?;
    let expected: String = header_field(path, &header, "fingerprint")?;
    let mut bb = ToyBackbone::new(config, dtype)?;
    let n_base = bb
        .store()
        .entries()
        .iter()
        .filter(|e| matches!(e.slot, Slot::Base(_)))
        .count();
    if tensors.len() != n_base {
        return Err(Error::format(
            path,
            format!("{} tensors for a backbone with {n_base}", tensors.len()),
        ));
    }
    for (name, t) in tensors {
        let id = bb
            .store()
            .find(&name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter `{name}`")))?;
        bb.store_mut().set_value(id, &t)?;
    }
    if bb.dtype() == header_dtype(&header) {
        let found = bb.fingerprint()?;
        if found != expected {
            return Err(Error::Fingerprint { expected, found });
        }
    }
    Ok(bb)
}

fn header_dtype(header: &Map<String, Value>) -> DType {
    let f64s = header
        .get("tensors")
        .and_then(Value::as_array)
        .and_then(|a| a.first())
        .and_then(|t| t.get("dtype"))
        .and_then(Value::as_str)
        == Some("f64");
    if f64s {
        DType::F64
    } else {
        DType::F32
    }
}
