//! Task prompt tables: trainable embedding rows that replace a text
//! prompt, their initialisation, assembly into a conditioning sequence,
//! and optional per-layer (deep) prompts.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::canvas::{Seed, TaskKind};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, standard_normal};

/// Standard deviation of random prompt initialisation.
pub const RANDOM_INIT_STD: f64 = 0.02;

/// Row-major `rows × dim` matrix of 32-bit embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Embeddings {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { rows, dim, data: vec![0.0; rows * dim] }
    }

    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(format!("{} values for {rows}x{dim} embeddings", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite embedding value"));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("rows of unequal length"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::shape(format!("row of length {} for dim {}", row.len(), self.dim)));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Rows of `self` followed by rows of `tail`.
    pub fn concat(&self, tail: &Embeddings) -> Result<Embeddings> {
        if self.dim != tail.dim {
            return Err(Error::shape(format!("embedding dims {} and {}", self.dim, tail.dim)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&tail.data);
        Ok(Embeddings { rows: self.rows + tail.rows, dim: self.dim, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InitMode {
    Random,
    TokenWise,
    #[default]
    TokenAvgs,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::TokenWise => "token_wise",
            InitMode::TokenAvgs => "token_avgs",
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [InitMode::Random, InitMode::TokenWise, InitMode::TokenAvgs]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown init mode `{s}`")))
    }
}

/// Builds an `length × D` prompt.
///
/// `Random` draws i.i.d. normals with std 0.02, `TokenWise` repeats the
/// description tokens cyclically, `TokenAvgs` fills every row with their mean.
pub fn init_prompt(desc: &Embeddings, length: usize, dim: usize, mode: InitMode, seed: Seed) -> Result<Embeddings> {
    if length == 0 {
        return Err(Error::invalid("prompt length must be at least 1"));
    }
    match mode {
        InitMode::Random => {
            let mut rng = seeded_rng(seed, "prompt-init");
            let data = (0..length * dim).map(|_| (standard_normal(&mut rng) * RANDOM_INIT_STD) as f32).collect();
            Embeddings::new(length, dim, data)
        }
        InitMode::TokenWise | InitMode::TokenAvgs => {
            if desc.rows() == 0 {
                return Err(Error::invalid(format!("{mode} initialisation needs description tokens")));
            }
            if desc.dim() != dim {
                return Err(Error::shape(format!("description dim {} vs prompt dim {dim}", desc.dim())));
            }
            let mut out = Embeddings::zeros(0, dim);
            if mode == InitMode::TokenWise {
                for i in 0..length {
                    out.push_row(desc.row(i % desc.rows()))?;
                }
            } else {
                let mut mean = vec![0.0f64; dim];
                for r in 0..desc.rows() {
                    for (m, v) in mean.iter_mut().zip(desc.row(r)) {
                        *m += f64::from(*v);
                    }
                }
                let mean: Vec<f32> = mean.iter().map(|m| (m / desc.rows() as f64) as f32).collect();
                for _ in 0..length {
                    out.push_row(&mean)?;
                }
            }
            Ok(out)
        }
    }
}

/// Deterministic stand-in for a text tokenizer plus token-embedding table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyVocabulary {
    pub dim: usize,
    pub seed: Seed,
    pub scale: f64,
}

impl ToyVocabulary {
    pub fn new(dim: usize, seed: Seed) -> Self {
        Self { dim, seed, scale: 0.4 }
    }

    pub fn token(&self, word: &str) -> Vec<f32> {
        let mut rng = seeded_rng(self.seed, &format!("token:{word}"));
        (0..self.dim).map(|_| (standard_normal(&mut rng) * self.scale) as f32).collect()
    }

    /// Lower-cased alphanumeric words, one embedding row each.
    pub fn embed(&self, text: &str) -> Embeddings {
        let mut out = Embeddings::zeros(0, self.dim);
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let lower: alloc::string::String = word.chars().flat_map(char::to_lowercase).collect();
            out.push_row(&self.token(&lower)).expect("dims agree");
        }
        out
    }
}

/// Anything that maps a pre-encoder token sequence to conditioning features.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, tokens: &Embeddings) -> Result<Embeddings>;
}

/// Prompt rows, then the pose token if present; under `use_null` every
/// row is replaced by the null embedding.
pub fn assemble_condition(
    prompt: &Embeddings,
    pose_token: Option<&[f32]>,
    null_embedding: &[f32],
    use_null: bool,
) -> Result<Embeddings> {
    let dim = prompt.dim();
    if null_embedding.len() != dim {
        return Err(Error::shape(format!("null embedding of length {} for dim {dim}", null_embedding.len())));
    }
    let mut seq = prompt.clone();
    if let Some(tok) = pose_token {
        seq.push_row(tok)?;
    }
    if use_null {
        let mut nulls = Embeddings::zeros(0, dim);
        for _ in 0..seq.rows() {
            nulls.push_row(null_embedding)?;
        }
        return Ok(nulls);
    }
    Ok(seq)
}

/// [`assemble_condition`] followed by the frozen encoder.
pub fn encode_condition(
    encoder: &dyn TextEncoder,
    prompt: &Embeddings,
    pose_token: Option<&[f32]>,
    null_embedding: &[f32],
    use_null: bool,
) -> Result<Embeddings> {
    if encoder.dim() != prompt.dim() {
        return Err(Error::shape(format!("encoder dim {} vs prompt dim {}", encoder.dim(), prompt.dim())));
    }
    encoder.encode(&assemble_condition(prompt, pose_token, null_embedding, use_null)?)
}

/// A trained prompt for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry {
    pub prompt: Embeddings,
    pub null_embedding: Vec<f32>,
    pub init_mode: InitMode,
    pub deep: DeepPromptSet,
}

impl PromptEntry {
    pub fn new(prompt: Embeddings, init_mode: InitMode) -> Self {
        let dim = prompt.dim();
        Self { prompt, null_embedding: vec![0.0; dim], init_mode, deep: DeepPromptSet::disabled(dim) }
    }

    /// Trainable scalars: `L × D`, plus the null row under CFG training, plus deep prompts.
    pub fn trainable_count(&self, cfg_training: bool) -> usize {
        let null = if cfg_training { self.null_embedding.len() } else { 0 };
        self.prompt.rows() * self.prompt.dim() + null + self.deep.layer_parameter_count()
    }
}

/// Task-keyed prompt storage sharing one embedding width.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptTable {
    entries: BTreeMap<TaskKind, PromptEntry>,
}

impl PromptTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task: TaskKind, entry: PromptEntry) -> Result<()> {
        if let Some(dim) = self.dim() {
            if entry.prompt.dim() != dim {
                return Err(Error::shape(format!("prompt dim {} vs table dim {dim}", entry.prompt.dim())));
            }
        }
        self.entries.insert(task, entry);
        Ok(())
    }

    /// Initialises a task's prompt from its description sentence.
    pub fn init_task(&mut self, task: TaskKind, rows: usize, vocab: &ToyVocabulary, mode: InitMode, seed: Seed) -> Result<()> {
        let desc = vocab.embed(task.description());
        let prompt = init_prompt(&desc, rows, vocab.dim, mode, derive_seed(seed, task.as_str(), 0))?;
        self.insert(task, PromptEntry::new(prompt, mode))
    }

    pub fn get(&self, task: TaskKind) -> Result<&PromptEntry> {
        self.entries.get(&task).ok_or_else(|| Error::UnknownTask(task.as_str().into()))
    }

    pub fn get_mut(&mut self, task: TaskKind) -> Result<&mut PromptEntry> {
        self.entries.get_mut(&task).ok_or_else(|| Error::UnknownTask(task.as_str().into()))
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.prompt.dim())
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskKind> + '_ {
        self.entries.keys().copied()
    }
}

/// Per-cross-attention-layer prompt rows, prepended to that layer's keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepPromptSet {
    dim: usize,
    layers: Vec<Embeddings>,
}

impl DeepPromptSet {
    pub fn disabled(dim: usize) -> Self {
        Self { dim, layers: Vec::new() }
    }

    pub fn init(layer_count: usize, length: usize, dim: usize, seed: Seed) -> Result<Self> {
        let empty = Embeddings::zeros(0, dim);
        let layers = (0..layer_count)
            .map(|i| init_prompt(&empty, length, dim, InitMode::Random, derive_seed(seed, "deep-prompt", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, layers })
    }

    pub fn from_layers(dim: usize, layers: Vec<Embeddings>) -> Result<Self> {
        if layers.iter().any(|l| l.dim() != dim) {
            return Err(Error::shape("deep prompt layer with a different dim"));
        }
        Ok(Self { dim, layers })
    }

    pub fn is_enabled(&self) -> bool {
        !self.layers.is_empty()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Embeddings] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Embeddings] {
        &mut self.layers
    }

    pub fn layer_parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.rows() * l.dim()).sum()
    }

    /// Total trainable scalars together with a shallow prompt of the same length.
    pub fn total_with_shallow(&self) -> usize {
        let per = self.layers.first().map_or(0, |l| l.rows() * l.dim());
        per * (1 + self.layers.len())
    }
}

/// Extends the cross-attention key/value sequence of `layer_index`.
pub fn inject_deep_prompts(layer_index: usize, base_kv: &Embeddings, deep: &DeepPromptSet) -> Result<Embeddings> {
    if !deep.is_enabled() {
        return Ok(base_kv.clone());
    }
    let layer = deep
        .layers
        .get(layer_index)
        .ok_or(Error::MissingLayer { index: layer_index, count: deep.layers.len() })?;
    layer.concat(base_kv)
}

/// `L × D` scalars of a shallow prompt.
pub fn shallow_prompt_params(length: usize, dim: usize) -> u64 {
    (length * dim) as u64
}

/// `L × D × (1 + layers)` scalars of a deep prompt stack with its shallow prompt.
pub fn deep_prompt_params(length: usize, dim: usize, layers: usize) -> u64 {
    (length * dim * (1 + layers)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumEncoder(usize);

    impl TextEncoder for SumEncoder {
        fn dim(&self) -> usize {
            self.0
        }
        fn encode(&self, tokens: &Embeddings) -> Result<Embeddings> {
            // Position-dependent so row order matters.
            let mut out = tokens.clone();
            for r in 0..out.rows() {
                for v in &mut out.data_mut()[r * self.0..(r + 1) * self.0] {
                    *v = *v * 2.0 + r as f32;
                }
            }
            Ok(out)
        }
    }

    fn desc(rows: usize, dim: usize) -> Embeddings {
        ToyVocabulary::new(dim, Seed(1)).embed(&(0..rows).map(|i| format!("w{i} ")).collect::<alloc::string::String>())
    }

    #[test]
    fn token_avgs_rows_are_the_mean() {
        let d = desc(10, 16);
        let p = init_prompt(&d, 50, 16, InitMode::TokenAvgs, Seed(0)).unwrap();
        assert_eq!(p.rows(), 50);
        for c in 0..16 {
            let mean: f64 = (0..10).map(|r| f64::from(d.row(r)[c])).sum::<f64>() / 10.0;
            for r in 0..50 {
                assert_eq!(p.row(r), p.row(0));
                assert!((f64::from(p.row(r)[c]) - mean).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn token_wise_repeats_cyclically() {
        let d = desc(7, 8);
        let p = init_prompt(&d, 50, 8, InitMode::TokenWise, Seed(0)).unwrap();
        for i in 0..50 {
            assert_eq!(p.row(i), d.row(i % 7));
        }
    }

    #[test]
    fn random_init_is_seeded() {
        let e = Embeddings::zeros(0, 8);
        let a = init_prompt(&e, 5, 8, InitMode::Random, Seed(3)).unwrap();
        let b = init_prompt(&e, 5, 8, InitMode::Random, Seed(3)).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_ne!(a, init_prompt(&e, 5, 8, InitMode::Random, Seed(4)).unwrap());
        assert!(init_prompt(&e, 5, 8, InitMode::TokenAvgs, Seed(3)).is_err());
        assert!(init_prompt(&e, 0, 8, InitMode::Random, Seed(3)).is_err());
    }

    #[test]
    fn assembled_lengths() {
        let p = Embeddings::zeros(50, 4);
        assert_eq!(assemble_condition(&p, None, &[0.0; 4], false).unwrap().rows(), 50);
        let nvs = Embeddings::zeros(72, 4);
        assert_eq!(assemble_condition(&nvs, Some(&[1.0; 4]), &[0.0; 4], false).unwrap().rows(), 73);
        assert!(assemble_condition(&p, Some(&[1.0; 3]), &[0.0; 4], false).is_err());
        assert!(assemble_condition(&p, None, &[0.0; 3], false).is_err());
    }

    #[test]
    fn null_condition_ignores_prompt_contents() {
        let enc = SumEncoder(6);
        let d = desc(9, 6);
        let p = init_prompt(&d, 9, 6, InitMode::TokenWise, Seed(0)).unwrap();
        let mut permuted = Embeddings::zeros(0, 6);
        for r in (0..9).rev() {
            permuted.push_row(p.row(r)).unwrap();
        }
        let null = [0.25f32; 6];
        let a = encode_condition(&enc, &p, Some(&[0.5; 6]), &null, true).unwrap();
        let b = encode_condition(&enc, &permuted, Some(&[0.9; 6]), &null, true).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            encode_condition(&enc, &p, None, &null, false).unwrap(),
            encode_condition(&enc, &permuted, None, &null, false).unwrap()
        );
    }

    #[test]
    fn deep_prompt_accounting() {
        assert_eq!(deep_prompt_params(25, 1024, 16), 435_200);
        assert_eq!(shallow_prompt_params(50, 1024), 51_200);
        assert_eq!(shallow_prompt_params(73, 1024), 74_752);
        let deep = DeepPromptSet::init(16, 25, 1024, Seed(0)).unwrap();
        assert_eq!(deep.total_with_shallow(), 435_200);
    }

    #[test]
    fn deep_injection_extends_each_layer() {
        let deep = DeepPromptSet::init(16, 25, 8, Seed(0)).unwrap();
        let base = Embeddings::zeros(50, 8);
        for layer in 0..16 {
            let ext = inject_deep_prompts(layer, &base, &deep).unwrap();
            assert_eq!(ext.rows(), 75);
            assert_eq!(ext.row(0), deep.layers()[layer].row(0));
        }
        assert!(matches!(inject_deep_prompts(16, &base, &deep), Err(Error::MissingLayer { .. })));
        assert_eq!(inject_deep_prompts(3, &base, &DeepPromptSet::disabled(8)).unwrap(), base);
    }

    #[test]
    fn table_lookup_and_counts() {
        let mut t = PromptTable::new();
        let vocab = ToyVocabulary::new(16, Seed(2));
        t.init_task(TaskKind::RefInpaint, 50, &vocab, InitMode::TokenAvgs, Seed(0)).unwrap();
        assert_eq!(t.get(TaskKind::RefInpaint).unwrap().trainable_count(false), 800);
        assert_eq!(t.get(TaskKind::RefInpaint).unwrap().trainable_count(true), 816);
        assert!(matches!(t.get(TaskKind::Nvs), Err(Error::UnknownTask(_))));
        let bad = PromptEntry::new(Embeddings::zeros(3, 8), InitMode::Random);
        assert!(t.insert(TaskKind::Nvs, bad).is_err());
    }
}
