//! Freeze policies, low-rank adapters, and trainable-parameter accounting.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::canvas::Seed;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{fill_standard_normal, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FreezePolicy {
    PromptOnly,
    Lora,
    LoraPlusFirstConv,
    FullFinetune,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 4] =
        [FreezePolicy::PromptOnly, FreezePolicy::Lora, FreezePolicy::LoraPlusFirstConv, FreezePolicy::FullFinetune];

    pub fn as_str(self) -> &'static str {
        match self {
            FreezePolicy::PromptOnly => "prompt_only",
            FreezePolicy::Lora => "lora",
            FreezePolicy::LoraPlusFirstConv => "lora_plus_first_conv",
            FreezePolicy::FullFinetune => "full_finetune",
        }
    }

    pub fn uses_lora(self) -> bool {
        matches!(self, FreezePolicy::Lora | FreezePolicy::LoraPlusFirstConv)
    }

    /// Whether a base backbone parameter of `role` receives gradients.
    pub fn trains(self, role: ParamRole) -> bool {
        match role {
            ParamRole::TextEncoder => false,
            ParamRole::Conditioning => true,
            ParamRole::FirstConv => matches!(self, FreezePolicy::LoraPlusFirstConv | FreezePolicy::FullFinetune),
            ParamRole::AttentionProjection { .. } | ParamRole::Backbone => self == FreezePolicy::FullFinetune,
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FreezePolicy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown freeze policy `{s}`")))
    }
}

/// Default adapter rank.
pub const DEFAULT_LORA_RANK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub site: String,
    pub rank: usize,
    /// `r × d_in`
    pub down: Matrix,
    /// `d_out × r`
    pub up: Matrix,
    pub scale: f64,
}

impl LoraAdapter {
    /// `down` ~ N(0, 0.02²), `up` = 0, scale 1 (α = r).
    pub fn new(site: impl Into<String>, d_in: usize, d_out: usize, rank: usize, seed: Seed) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::invalid(format!("rank {rank} must lie in 1..={}", d_in.min(d_out))));
        }
        let site = site.into();
        let mut down = Matrix::zeros(rank, d_in);
        let mut rng = seeded_rng(seed, &format!("lora:{site}"));
        fill_standard_normal(&mut rng, down.data_mut());
        Ok(Self { site, rank, down: down.scale(0.02), up: Matrix::zeros(d_out, rank), scale: 1.0 })
    }

    pub fn d_in(&self) -> usize {
        self.down.cols()
    }

    pub fn d_out(&self) -> usize {
        self.up.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    fn check(&self, w: &Matrix) -> Result<()> {
        if self.rank > self.d_in().min(self.d_out()) {
            return Err(Error::invalid(format!("rank {} exceeds min(d_in, d_out)", self.rank)));
        }
        if self.down.rows() != self.rank || self.up.cols() != self.rank {
            return Err(Error::shape("adapter factors disagree with the rank"));
        }
        if w.rows() != self.d_out() || w.cols() != self.d_in() {
            return Err(Error::shape(format!(
                "adapter {}x{} for weight {}x{}",
                self.d_out(),
                self.d_in(),
                w.rows(),
                w.cols()
            )));
        }
        Ok(())
    }

    /// `scale · B · A`
    pub fn delta(&self) -> Result<Matrix> {
        Ok(self.up.matmul(&self.down)?.scale(self.scale))
    }
}

/// `W·x + scale·B·(A·x)`
pub fn apply_lora(x: &[f64], w: &Matrix, adapter: &LoraAdapter) -> Result<Vec<f64>> {
    adapter.check(w)?;
    let base = w.matvec(x)?;
    let low = adapter.down.matvec(x)?;
    let lift = adapter.up.matvec(&low)?;
    Ok(base.iter().zip(&lift).map(|(b, l)| b + adapter.scale * l).collect())
}

/// `W + scale·B·A`
pub fn merge_lora(w: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    adapter.check(w)?;
    w.add(&adapter.delta()?)
}

/// A frozen linear map with one adapter, which can be merged exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear {
    weight: Matrix,
    adapter: LoraAdapter,
    merged: bool,
}

impl LoraLinear {
    pub fn new(weight: Matrix, adapter: LoraAdapter) -> Result<Self> {
        adapter.check(&weight)?;
        Ok(Self { weight, adapter, merged: false })
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.merged {
            self.weight.matvec(x)
        } else {
            apply_lora(x, &self.weight, &self.adapter)
        }
    }

    pub fn merge(&mut self) -> Result<()> {
        if self.merged {
            return Err(Error::AlreadyMerged(self.adapter.site.clone()));
        }
        self.weight = merge_lora(&self.weight, &self.adapter)?;
        self.merged = true;
        Ok(())
    }
}

/// What a parameter tensor is, for freeze decisions and accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// The input convolution of the denoiser.
    FirstConv,
    /// An attention projection weight, i.e. a LoRA site.
    AttentionProjection { d_in: usize, d_out: usize },
    /// Any other denoiser parameter.
    Backbone,
    /// Frozen text encoder weights.
    TextEncoder,
    /// Conditioning-side modules (pose projector) that always train.
    Conditioning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub role: ParamRole,
    pub count: u64,
}

/// Flat list of a model's parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamInventory {
    pub groups: Vec<ParamGroup>,
}

impl ParamInventory {
    pub fn push(&mut self, name: impl Into<String>, role: ParamRole, count: u64) {
        self.groups.push(ParamGroup { name: name.into(), role, count });
    }

    pub fn total(&self, pred: impl Fn(ParamRole) -> bool) -> u64 {
        self.groups.iter().filter(|g| pred(g.role)).map(|g| g.count).sum()
    }

    /// Denoiser parameters (everything but the text encoder and conditioning modules).
    pub fn denoiser_total(&self) -> u64 {
        self.total(|r| !matches!(r, ParamRole::TextEncoder | ParamRole::Conditioning))
    }

    pub fn lora_sites(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.groups.iter().filter_map(|g| match g.role {
            ParamRole::AttentionProjection { d_in, d_out } => Some((g.name.as_str(), d_in, d_out)),
            _ => None,
        })
    }
}

/// Trainable scalars under `policy`, given the prompt-side count.
pub fn count_trainable(inventory: &ParamInventory, policy: FreezePolicy, prompt_params: u64, lora_rank: usize) -> u64 {
    let base = inventory.total(|role| policy.trains(role));
    let lora: u64 = if policy.uses_lora() {
        inventory.lora_sites().map(|(_, d_in, d_out)| (lora_rank * (d_in + d_out)) as u64).sum()
    } else {
        0
    };
    prompt_params + base + lora
}

pub mod reference {
    //! Parameter inventory of the 0.8B-parameter latent-diffusion denoiser
    //! used at full scale (four resolution levels of 320/640/1280/1280
    //! channels, 16 transformer blocks, 1024-dim text features).

    use super::{ParamInventory, ParamRole};
    use alloc::format;

    const CONTEXT_DIM: usize = 1024;
    const TIME_DIM: usize = 1280;

    fn conv(inv: &mut ParamInventory, name: &str, c_in: usize, c_out: usize, k: usize, role: ParamRole) {
        inv.push(format!("{name}.weight"), role, (c_in * c_out * k * k) as u64);
        inv.push(format!("{name}.bias"), ParamRole::Backbone, c_out as u64);
    }

    fn linear(inv: &mut ParamInventory, name: &str, d_in: usize, d_out: usize, bias: bool, role: ParamRole) {
        inv.push(format!("{name}.weight"), role, (d_in * d_out) as u64);
        if bias {
            inv.push(format!("{name}.bias"), ParamRole::Backbone, d_out as u64);
        }
    }

    fn norm(inv: &mut ParamInventory, name: &str, c: usize) {
        inv.push(format!("{name}.affine"), ParamRole::Backbone, 2 * c as u64);
    }

    fn resnet(inv: &mut ParamInventory, name: &str, c_in: usize, c_out: usize) {
        norm(inv, &format!("{name}.norm1"), c_in);
        conv(inv, &format!("{name}.conv1"), c_in, c_out, 3, ParamRole::Backbone);
        linear(inv, &format!("{name}.time_emb_proj"), TIME_DIM, c_out, true, ParamRole::Backbone);
        norm(inv, &format!("{name}.norm2"), c_out);
        conv(inv, &format!("{name}.conv2"), c_out, c_out, 3, ParamRole::Backbone);
        if c_in != c_out {
            conv(inv, &format!("{name}.conv_shortcut"), c_in, c_out, 1, ParamRole::Backbone);
        }
    }

    fn attention(inv: &mut ParamInventory, name: &str, c: usize, ctx: usize) {
        let site = |d_in| ParamRole::AttentionProjection { d_in, d_out: c };
        linear(inv, &format!("{name}.to_q"), c, c, false, site(c));
        linear(inv, &format!("{name}.to_k"), ctx, c, false, site(ctx));
        linear(inv, &format!("{name}.to_v"), ctx, c, false, site(ctx));
        linear(inv, &format!("{name}.to_out"), c, c, true, site(c));
    }

    fn transformer(inv: &mut ParamInventory, name: &str, c: usize) {
        norm(inv, &format!("{name}.norm"), c);
        linear(inv, &format!("{name}.proj_in"), c, c, true, ParamRole::Backbone);
        norm(inv, &format!("{name}.norm1"), c);
        attention(inv, &format!("{name}.attn1"), c, c);
        norm(inv, &format!("{name}.norm2"), c);
        attention(inv, &format!("{name}.attn2"), c, CONTEXT_DIM);
        norm(inv, &format!("{name}.norm3"), c);
        linear(inv, &format!("{name}.ff.proj"), c, 8 * c, true, ParamRole::Backbone);
        linear(inv, &format!("{name}.ff.out"), 4 * c, c, true, ParamRole::Backbone);
        linear(inv, &format!("{name}.proj_out"), c, c, true, ParamRole::Backbone);
    }

    /// Enumerates every parameter tensor; `in_channels` is 9 for inpainting.
    pub fn unet_inventory(in_channels: usize) -> ParamInventory {
        let mut inv = ParamInventory::default();
        let ch = [320usize, 640, 1280, 1280];
        let attn = [true, true, true, false];
        inv.push("conv_in.weight", ParamRole::FirstConv, (in_channels * 320 * 9) as u64);
        inv.push("conv_in.bias", ParamRole::FirstConv, 320);
        linear(&mut inv, "time_embedding.linear_1", 320, TIME_DIM, true, ParamRole::Backbone);
        linear(&mut inv, "time_embedding.linear_2", TIME_DIM, TIME_DIM, true, ParamRole::Backbone);

        let mut skips = alloc::vec![320usize];
        let mut c_prev = 320;
        for (i, &c) in ch.iter().enumerate() {
            for j in 0..2 {
                resnet(&mut inv, &format!("down.{i}.resnets.{j}"), c_prev, c);
                if attn[i] {
                    transformer(&mut inv, &format!("down.{i}.attentions.{j}"), c);
                }
                c_prev = c;
                skips.push(c);
            }
            if i < 3 {
                conv(&mut inv, &format!("down.{i}.downsample"), c, c, 3, ParamRole::Backbone);
                skips.push(c);
            }
        }

        resnet(&mut inv, "mid.resnets.0", 1280, 1280);
        transformer(&mut inv, "mid.attentions.0", 1280);
        resnet(&mut inv, "mid.resnets.1", 1280, 1280);

        let up_attn = [false, true, true, true];
        for (i, &c) in ch.iter().rev().enumerate() {
            for j in 0..3 {
                let skip = skips.pop().expect("skip connection");
                resnet(&mut inv, &format!("up.{i}.resnets.{j}"), c_prev + skip, c);
                if up_attn[i] {
                    transformer(&mut inv, &format!("up.{i}.attentions.{j}"), c);
                }
                c_prev = c;
            }
            if i < 3 {
                conv(&mut inv, &format!("up.{i}.upsample"), c, c, 3, ParamRole::Backbone);
            }
        }
        norm(&mut inv, "conv_norm_out", 320);
        conv(&mut inv, "conv_out", 320, 4, 3, ParamRole::Backbone);
        inv
    }

    /// Number of cross-attention layers (one per transformer block).
    pub const CROSS_ATTENTION_LAYERS: usize = 16;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rng: &mut crate::StreamRng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_up_factor_is_exact_noop() {
        let mut rng = seeded_rng(Seed(1), "t");
        let w = random_matrix(&mut rng, 12, 10);
        let a = LoraAdapter::new("q", 10, 12, 4, Seed(2)).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = apply_lora(&x, &w, &a).unwrap();
            let y0 = w.matvec(&x).unwrap();
            assert_eq!(y.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(merge_lora(&w, &a).unwrap(), w);
    }

    #[test]
    fn adapter_matches_dense_merge() {
        let mut rng = seeded_rng(Seed(3), "t");
        let w = random_matrix(&mut rng, 9, 7);
        let mut a = LoraAdapter::new("k", 7, 9, 3, Seed(4)).unwrap();
        a.up = random_matrix(&mut rng, 9, 3);
        a.scale = 0.7;
        let merged = merge_lora(&w, &a).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = apply_lora(&x, &w, &a).unwrap();
            let dense = merged.matvec(&x).unwrap();
            for (p, q) in y.iter().zip(&dense) {
                assert!((p - q).abs() <= 1e-6 * p.abs().max(q.abs()).max(1e-12) + 1e-15);
            }
        }
    }

    #[test]
    fn rank_and_shape_checks() {
        assert!(LoraAdapter::new("v", 4, 8, 5, Seed(0)).is_err());
        assert!(LoraAdapter::new("v", 4, 8, 0, Seed(0)).is_err());
        let a = LoraAdapter::new("v", 4, 8, 2, Seed(0)).unwrap();
        assert!(apply_lora(&[0.0; 4], &Matrix::zeros(8, 5), &a).is_err());
        assert_eq!(a.parameter_count(), 2 * 12);
    }

    #[test]
    fn merging_twice_is_refused() {
        let mut rng = seeded_rng(Seed(5), "t");
        let mut a = LoraAdapter::new("o", 6, 6, 2, Seed(6)).unwrap();
        a.up = random_matrix(&mut rng, 6, 2);
        let w = random_matrix(&mut rng, 6, 6);
        let mut layer = LoraLinear::new(w.clone(), a.clone()).unwrap();
        layer.merge().unwrap();
        assert!(matches!(layer.merge(), Err(Error::AlreadyMerged(_))));
        let twice = merge_lora(&merge_lora(&w, &a).unwrap(), &a).unwrap();
        assert_ne!(&twice, layer.weight());
    }

    #[test]
    fn reference_unet_totals() {
        let base = reference::unet_inventory(4);
        assert_eq!(base.denoiser_total(), 865_910_724);
        let inpaint = reference::unet_inventory(9);
        assert_eq!(inpaint.denoiser_total(), 865_910_724 + 5 * 320 * 9);
        let full = count_trainable(&inpaint, FreezePolicy::FullFinetune, 0, 64);
        assert_eq!(libm::round(full as f64 / 1e5) / 10.0, 865.9);
        let blocks = inpaint.groups.iter().filter(|g| g.name.ends_with("attn2.to_k.weight")).count();
        assert_eq!(blocks, reference::CROSS_ATTENTION_LAYERS);
    }

    #[test]
    fn prompt_only_counts_prompt() {
        let inv = reference::unet_inventory(9);
        assert_eq!(count_trainable(&inv, FreezePolicy::PromptOnly, 51_200, 64), 51_200);
        let first_conv = inv.total(|r| r == ParamRole::FirstConv);
        assert_eq!(
            count_trainable(&inv, FreezePolicy::LoraPlusFirstConv, 0, 64),
            count_trainable(&inv, FreezePolicy::Lora, 0, 64) + first_conv
        );
    }
}
