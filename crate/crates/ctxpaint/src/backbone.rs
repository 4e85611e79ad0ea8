//! The desk-scale denoiser: a three-level encoder–decoder over channel-last
//! latents with self- and cross-attention at the two coarsest scales.

use candle_core::{DType, Tensor};
use ctxpaint_core::adapters::{FreezePolicy, ParamInventory, ParamRole};
use ctxpaint_core::rng::derive_seed;
use ctxpaint_core::Seed;

use crate::error::{Error, Result};
use crate::nn::{
    attend, timestep_features, Conv3x3, GroupNorm, LayerNorm, Linear, ParamStore, Resize, Slot,
};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub latent_channels: usize,
    /// Widths at full, half and quarter (and eighth) resolution.
    pub channels: [usize; 3],
    /// Width of conditioning tokens.
    pub context_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub seed: Seed,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            channels: [32, 48, 64],
            context_dim: 64,
            time_dim: 128,
            groups: 8,
            seed: Seed(0),
        }
    }
}

impl ToyConfig {
    /// A very small variant for finite-difference checks.
    pub fn tiny(latent_channels: usize) -> Self {
        Self {
            latent_channels,
            channels: [8, 8, 8],
            context_dim: 16,
            time_dim: 16,
            groups: 2,
            seed: Seed(0),
        }
    }

    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }
}

fn role_proj(d_in: usize, d_out: usize) -> ParamRole {
    ParamRole::AttentionProjection { d_in, d_out }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3x3,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv3x3,
    skip: Option<Linear>,
    c_out: usize,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &ToyConfig,
        seed: Seed,
    ) -> Result<Self> {
        let s = |i| derive_seed(seed, name, i);
        let b = ParamRole::Backbone;
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cfg.groups, c_in, b)?,
            conv1: Conv3x3::new(
                store,
                &format!("{name}.conv1"),
                c_in,
                c_out,
                1,
                b,
                s(0),
                1.0,
            )?,
            time: Linear::new(
                store,
                &format!("{name}.time"),
                cfg.time_dim,
                2 * c_out,
                true,
                b,
                s(1),
                0.5,
            )?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cfg.groups, c_out, b)?,
            conv2: Conv3x3::new(
                store,
                &format!("{name}.conv2"),
                c_out,
                c_out,
                1,
                b,
                s(2),
                0.5,
            )?,
            skip: if c_in != c_out {
                Some(Linear::new(
                    store,
                    &format!("{name}.skip"),
                    c_in,
                    c_out,
                    true,
                    b,
                    s(3),
                    1.0,
                )?)
            } else {
                None
            },
            c_out,
        })
    }

    fn forward(&self, p: &ParamStore, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(p, &self.norm1.forward(p, x)?.silu()?)?;
        let ts = self.time.forward(p, temb)?;
        let b = ts.dim(0)?;
        let scale = ts
            .narrow(1, 0, self.c_out)?
            .reshape((b, 1, 1, self.c_out))?;
        let shift = ts
            .narrow(1, self.c_out, self.c_out)?
            .reshape((b, 1, 1, self.c_out))?;
        let h = self.norm2.forward(p, &h)?;
        let h = h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        let h = self.conv2.forward(p, &h.silu()?)?;
        let skip = match &self.skip {
            Some(l) => l.forward(p, x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Captured input of one self-attention layer, enough to recompute its
/// pre-softmax scores.
#[derive(Debug, Clone)]
pub struct ProbeCapture {
    pub layer: String,
    pub grid: (usize, usize),
    /// `B×N×C` normalised features fed to the query and key projections.
    pub features: Tensor,
    /// `C×C` effective projections.
    pub wq: Tensor,
    pub wk: Tensor,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    name: String,
    norm1: LayerNorm,
    q1: Linear,
    k1: Linear,
    v1: Linear,
    o1: Linear,
    norm2: LayerNorm,
    q2: Linear,
    k2: Linear,
    v2: Linear,
    o2: Linear,
    norm3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl AttnBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize, d: usize, seed: Seed) -> Result<Self> {
        let s = |i| derive_seed(seed, name, i);
        let b = ParamRole::Backbone;
        let n = |suffix: &str| format!("{name}.{suffix}");
        Ok(Self {
            name: name.to_string(),
            norm1: LayerNorm::new(store, &n("norm1"), c, b)?,
            q1: Linear::new(store, &n("self.q"), c, c, false, role_proj(c, c), s(0), 1.0)?,
            k1: Linear::new(store, &n("self.k"), c, c, false, role_proj(c, c), s(1), 1.0)?,
            v1: Linear::new(store, &n("self.v"), c, c, false, role_proj(c, c), s(2), 1.0)?,
            o1: Linear::new(store, &n("self.o"), c, c, true, role_proj(c, c), s(3), 0.5)?,
            norm2: LayerNorm::new(store, &n("norm2"), c, b)?,
            q2: Linear::new(
                store,
                &n("cross.q"),
                c,
                c,
                false,
                role_proj(c, c),
                s(4),
                1.0,
            )?,
            k2: Linear::new(
                store,
                &n("cross.k"),
                d,
                c,
                false,
                role_proj(d, c),
                s(5),
                1.0,
            )?,
            v2: Linear::new(
                store,
                &n("cross.v"),
                d,
                c,
                false,
                role_proj(d, c),
                s(6),
                1.0,
            )?,
            o2: Linear::new(store, &n("cross.o"), c, c, true, role_proj(c, c), s(7), 0.5)?,
            norm3: LayerNorm::new(store, &n("norm3"), c, b)?,
            ff1: Linear::new(store, &n("ff1"), c, 2 * c, true, b, s(8), 1.0)?,
            ff2: Linear::new(store, &n("ff2"), 2 * c, c, true, b, s(9), 0.5)?,
        })
    }

    fn projections(&self) -> [&Linear; 8] {
        [
            &self.q1, &self.k1, &self.v1, &self.o1, &self.q2, &self.k2, &self.v2, &self.o2,
        ]
    }

    fn projections_mut(&mut self) -> [&mut Linear; 8] {
        [
            &mut self.q1,
            &mut self.k1,
            &mut self.v1,
            &mut self.o1,
            &mut self.q2,
            &mut self.k2,
            &mut self.v2,
            &mut self.o2,
        ]
    }

    fn forward(
        &self,
        p: &ParamStore,
        x: &Tensor,
        ctx: &Tensor,
        deep: Option<&Tensor>,
        probes: &mut Option<&mut Vec<ProbeCapture>>,
    ) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let tokens = x.reshape((b, h * w, c))?;
        let n1 = self.norm1.forward(p, &tokens)?;
        if let Some(list) = probes.as_deref_mut() {
            list.push(ProbeCapture {
                layer: self.name.clone(),
                grid: (h, w),
                features: n1.detach(),
                wq: self.q1.effective_weight(p)?.detach(),
                wk: self.k1.effective_weight(p)?.detach(),
            });
        }
        let a = attend(
            &self.q1.forward(p, &n1)?,
            &self.k1.forward(p, &n1)?,
            &self.v1.forward(p, &n1)?,
        )?;
        let tokens = (tokens + self.o1.forward(p, &a)?)?;

        let n2 = self.norm2.forward(p, &tokens)?;
        let kv = match deep {
            Some(rows) => {
                let (l, d) = rows.dims2()?;
                Tensor::cat(&[&rows.unsqueeze(0)?.broadcast_as((b, l, d))?, ctx], 1)?
            }
            None => ctx.clone(),
        };
        let a = attend(
            &self.q2.forward(p, &n2)?,
            &self.k2.forward(p, &kv)?,
            &self.v2.forward(p, &kv)?,
        )?;
        let tokens = (tokens + self.o2.forward(p, &a)?)?;

        let n3 = self.norm3.forward(p, &tokens)?;
        let tokens = (&tokens + self.ff2.forward(p, &self.ff1.forward(p, &n3)?.silu()?)?)?;
        Ok(tokens.reshape((b, h, w, c))?)
    }
}

/// Names of the self-attention layers that can be probed.
pub const PROBE_LAYERS: [&str; 3] = ["down.attn", "mid.attn", "up.attn"];
/// Probes at the quarter and eighth scales.
pub const DEFAULT_PROBES: [&str; 2] = ["down.attn", "mid.attn"];

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    config: ToyConfig,
    store: ParamStore,
    time1: Linear,
    time2: Linear,
    conv_in: Conv3x3,
    down0: Conv3x3,
    res1: ResBlock,
    down1: Conv3x3,
    res2: ResBlock,
    attn2: AttnBlock,
    down2: Conv3x3,
    mid_res: ResBlock,
    mid_attn: AttnBlock,
    up2_res: ResBlock,
    up2_attn: AttnBlock,
    up1_res: ResBlock,
    fuse: Linear,
    up0_norm: GroupNorm,
    up0_conv: Conv3x3,
    out_norm: GroupNorm,
    conv_out: Conv3x3,
    resize: Resize,
}

impl ToyBackbone {
    pub fn new(config: ToyConfig, dtype: DType) -> Result<Self> {
        let [c0, c1, c2] = config.channels;
        if config.channels.iter().any(|c| c % config.groups != 0) {
            return Err(Error::Config(format!(
                "channels {:?} must be multiples of {} groups",
                config.channels, config.groups
            )));
        }
        let mut p = ParamStore::new(dtype);
        let s = |i| derive_seed(config.seed, "toy-backbone", i);
        let b = ParamRole::Backbone;
        let d = config.context_dim;
        let tf = config.time_dim;
        let time1 = Linear::new(&mut p, "time.1", tf, tf, true, b, s(0), 1.0)?;
        let time2 = Linear::new(&mut p, "time.2", tf, tf, true, b, s(1), 1.0)?;
        let conv_in = Conv3x3::new(
            &mut p,
            "conv_in",
            config.input_channels(),
            c0,
            1,
            ParamRole::FirstConv,
            s(2),
            1.0,
        )?;
        let down0 = Conv3x3::new(&mut p, "down.0", c0, c1, 2, b, s(3), 1.0)?;
        let res1 = ResBlock::new(&mut p, "down.1.res", c1, c1, &config, s(4))?;
        let down1 = Conv3x3::new(&mut p, "down.1", c1, c2, 2, b, s(5), 1.0)?;
        let res2 = ResBlock::new(&mut p, "down.2.res", c2, c2, &config, s(6))?;
        let attn2 = AttnBlock::new(&mut p, "down.attn", c2, d, s(7))?;
        let down2 = Conv3x3::new(&mut p, "down.2", c2, c2, 2, b, s(8), 1.0)?;
        let mid_res = ResBlock::new(&mut p, "mid.res", c2, c2, &config, s(9))?;
        let mid_attn = AttnBlock::new(&mut p, "mid.attn", c2, d, s(10))?;
        let up2_res = ResBlock::new(&mut p, "up.2.res", 2 * c2, c2, &config, s(11))?;
        let up2_attn = AttnBlock::new(&mut p, "up.attn", c2, d, s(12))?;
        let up1_res = ResBlock::new(&mut p, "up.1.res", c2 + c1, c1, &config, s(13))?;
        let fuse = Linear::new(&mut p, "up.0.fuse", c1 + c0, c0, true, b, s(14), 1.0)?;
        let up0_norm = GroupNorm::new(&mut p, "up.0.norm", config.groups, c0, b)?;
        let up0_conv = Conv3x3::new(&mut p, "up.0.conv", c0, c0, 1, b, s(15), 1.0)?;
        let out_norm = GroupNorm::new(&mut p, "out.norm", config.groups, c0, b)?;
        let conv_out = Conv3x3::new(
            &mut p,
            "conv_out",
            c0,
            config.latent_channels,
            1,
            b,
            s(16),
            0.5,
        )?;
        Ok(Self {
            config,
            store: p,
            time1,
            time2,
            conv_in,
            down0,
            res1,
            down1,
            res2,
            attn2,
            down2,
            mid_res,
            mid_attn,
            up2_res,
            up2_attn,
            up1_res,
            fuse,
            up0_norm,
            up0_conv,
            out_norm,
            conv_out,
            resize: Resize::default(),
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Number of cross-attention layers, i.e. deep-prompt injection points.
    pub fn cross_attention_layers(&self) -> usize {
        3
    }

    fn attn_blocks(&self) -> [&AttnBlock; 3] {
        [&self.attn2, &self.mid_attn, &self.up2_attn]
    }

    /// Every attention projection, adapted or not, in a fixed order.
    pub fn attention_projections(&self) -> Vec<&Linear> {
        self.attn_blocks()
            .into_iter()
            .flat_map(|b| b.projections())
            .collect()
    }

    fn attn_blocks_mut(&mut self) -> [&mut AttnBlock; 3] {
        [&mut self.attn2, &mut self.mid_attn, &mut self.up2_attn]
    }

    /// Attaches adapters to every attention projection whose name passes `sites`.
    pub fn attach_lora(
        &mut self,
        rank: usize,
        seed: Seed,
        sites: &dyn Fn(&str) -> bool,
    ) -> Result<usize> {
        let mut store = std::mem::replace(&mut self.store, ParamStore::new(DType::F32));
        let mut n = 0;
        let mut result = Ok(());
        'outer: for block in self.attn_blocks_mut() {
            for lin in block.projections_mut() {
                if sites(&lin.name) {
                    if let Err(e) =
                        lin.attach_lora(&mut store, rank, derive_seed(seed, &lin.name, 0))
                    {
                        result = Err(e);
                        break 'outer;
                    }
                    n += 1;
                }
            }
        }
        self.store = store;
        result.map(|_| n)
    }

    pub fn has_lora(&self) -> bool {
        self.store
            .entries()
            .iter()
            .any(|e| matches!(e.slot, Slot::LoraDown | Slot::LoraUp))
    }

    /// Marks parameters trainable according to `policy`; adapters must already be attached for LoRA policies.
    pub fn apply_policy(&mut self, policy: FreezePolicy) -> Result<()> {
        if policy.uses_lora() && !self.has_lora() {
            return Err(Error::Config(format!(
                "policy {policy} needs adapters attached first"
            )));
        }
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let on = match self.store.entry(id).slot {
                Slot::Base(role) => policy.trains(role),
                Slot::LoraDown | Slot::LoraUp => policy.uses_lora(),
            };
            self.store.set_trainable(id, on)?;
        }
        Ok(())
    }

    pub fn inventory(&self) -> ParamInventory {
        let mut inv = ParamInventory::default();
        for e in self.store.entries() {
            if let Slot::Base(role) = e.slot {
                inv.push(e.name.clone(), role, e.elem_count() as u64);
            }
        }
        inv
    }

    pub fn parameter_count(&self) -> usize {
        self.store
            .entries()
            .iter()
            .filter(|e| matches!(e.slot, Slot::Base(_)))
            .map(|e| e.elem_count())
            .sum()
    }

    /// Digest over the base (non-adapter) weights in declaration order.
    pub fn fingerprint(&self) -> Result<String> {
        self.store.digest(|e| matches!(e.slot, Slot::Base(_)))
    }

    /// Predicted noise `B×H×W×C` for the stacked input `B×H×W×(2C+1)`.
    pub fn forward(
        &self,
        x: &Tensor,
        t: &[usize],
        ctx: &Tensor,
        deep: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        self.forward_probed(x, t, ctx, deep, None)
    }

    pub fn forward_probed(
        &self,
        x: &Tensor,
        t: &[usize],
        ctx: &Tensor,
        deep: Option<&[Tensor]>,
        probes: Option<&mut Vec<ProbeCapture>>,
    ) -> Result<Tensor> {
        let mut probes = probes;
        let p = &self.store;
        let (b, h, w, c) = x.dims4()?;
        if c != self.config.input_channels() || t.len() != b || ctx.dim(0)? != b {
            return Err(Error::Config(format!(
                "backbone input {b}x{h}x{w}x{c} with {} timesteps and {} contexts",
                t.len(),
                ctx.dim(0)?
            )));
        }
        if let Some(d) = deep {
            if d.len() != self.cross_attention_layers() {
                return Err(ctxpaint_core::Error::MissingLayer {
                    index: d.len(),
                    count: self.cross_attention_layers(),
                }
                .into());
            }
        }
        let layer = |i: usize| deep.map(|d| &d[i]);
        let feat = timestep_features(t, self.config.time_dim, self.dtype())?;
        let temb = self
            .time2
            .forward(p, &self.time1.forward(p, &feat)?.silu()?)?
            .silu()?;

        let h0 = self.conv_in.forward(p, x)?;
        let h1 = self.res1.forward(p, &self.down0.forward(p, &h0)?, &temb)?;
        let h2 = self.res2.forward(p, &self.down1.forward(p, &h1)?, &temb)?;
        let h2 = self.attn2.forward(p, &h2, ctx, layer(0), &mut probes)?;
        let h3 = self
            .mid_res
            .forward(p, &self.down2.forward(p, &h2)?, &temb)?;
        let h3 = self.mid_attn.forward(p, &h3, ctx, layer(1), &mut probes)?;

        let (_, h2h, h2w, _) = h2.dims4()?;
        let u2 = Tensor::cat(&[&self.resize.forward(&h3, h2h, h2w)?, &h2], 3)?;
        let u2 = self.up2_res.forward(p, &u2, &temb)?;
        let u2 = self.up2_attn.forward(p, &u2, ctx, layer(2), &mut probes)?;
        let (_, h1h, h1w, _) = h1.dims4()?;
        let u1 = Tensor::cat(&[&self.resize.forward(&u2, h1h, h1w)?, &h1], 3)?;
        let u1 = self.up1_res.forward(p, &u1, &temb)?;
        let u0 = Tensor::cat(&[&self.resize.forward(&u1, h, w)?, &h0], 3)?;
        let u0 = self.fuse.forward(p, &u0)?;
        let u0 = self
            .up0_conv
            .forward(p, &self.up0_norm.forward(p, &u0)?.silu()?)?;
        self.conv_out
            .forward(p, &self.out_norm.forward(p, &u0)?.silu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normal_values, tensor_from};

    fn inputs(cfg: &ToyConfig, b: usize, h: usize, w: usize, dtype: DType) -> (Tensor, Tensor) {
        let x = tensor_from(
            normal_values(Seed(1), "x", b * h * w * cfg.input_channels(), 1.0),
            &[b, h, w, cfg.input_channels()],
            dtype,
        )
        .unwrap();
        let ctx = tensor_from(
            normal_values(Seed(2), "c", b * 5 * cfg.context_dim, 1.0),
            &[b, 5, cfg.context_dim],
            dtype,
        )
        .unwrap();
        (x, ctx)
    }

    #[test]
    fn output_shape_and_budget() {
        let bb = ToyBackbone::new(ToyConfig::default(), DType::F32).unwrap();
        assert!(bb.parameter_count() < 5_000_000);
        let (x, ctx) = inputs(bb.config(), 2, 32, 64, DType::F32);
        let y = bb.forward(&x, &[10, 900], &ctx, None).unwrap();
        assert_eq!(y.dims(), &[2, 32, 64, 3]);
        let again = bb.forward(&x, &[10, 900], &ctx, None).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            again.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn tiny_latent_grid_runs() {
        let bb = ToyBackbone::new(ToyConfig::tiny(1), DType::F64).unwrap();
        let (x, ctx) = inputs(bb.config(), 1, 4, 8, DType::F64);
        assert_eq!(
            bb.forward(&x, &[3], &ctx, None).unwrap().dims(),
            &[1, 4, 8, 1]
        );
    }

    #[test]
    fn probes_capture_each_self_attention() {
        let bb = ToyBackbone::new(ToyConfig::default(), DType::F32).unwrap();
        let (x, ctx) = inputs(bb.config(), 1, 32, 64, DType::F32);
        let mut caps = Vec::new();
        bb.forward_probed(&x, &[500], &ctx, None, Some(&mut caps))
            .unwrap();
        let names: Vec<_> = caps.iter().map(|c| c.layer.as_str()).collect();
        assert_eq!(names, ["down.attn", "mid.attn", "up.attn"]);
        assert_eq!(caps[0].grid, (8, 16));
        assert_eq!(caps[1].grid, (4, 8));
    }

    #[test]
    fn policies_flag_expected_roles() {
        let mut bb = ToyBackbone::new(ToyConfig::default(), DType::F32).unwrap();
        assert!(bb.apply_policy(FreezePolicy::Lora).is_err());
        bb.apply_policy(FreezePolicy::PromptOnly).unwrap();
        assert!(bb.store().trainable().is_empty());
        let sites = bb.attach_lora(4, Seed(3), &|_| true).unwrap();
        assert_eq!(sites, 24);
        bb.apply_policy(FreezePolicy::LoraPlusFirstConv).unwrap();
        let names: Vec<String> = bb.store().trainable().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n == "conv_in.weight"));
        assert!(names
            .iter()
            .all(|n| n.starts_with("conv_in") || n.contains("lora")));
    }
}
