//! Noise schedule, denoiser interface, DDIM sampling and the training objective.
//!
//! The denoiser sees the channel stack `[z_t; ẑ_0; M]` where `ẑ_0` is the
//! known latent with the hole zeroed and `M` the latent-scale mask.

mod adaptive;
mod sampler;
mod schedule;
mod training;

pub use adaptive::{adaptive_sample, AdaptiveConfig, AdaptiveOutput, ForegroundDetector};
pub use sampler::{cfg_predict, ddim_sigma, ddim_step, predict_x0, sample, sample_latent, timesteps, SamplerConfig};
pub use schedule::NoiseSchedule;
pub use training::{draw_training, forward_noise, training_loss, LossWeighting, TrainingDraw};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::canvas::{ImageCanvas, MaskGrid, TaskKind};
use crate::error::{Error, Result};
use crate::stitch::StitchedCanvas;

/// Planar `C×H×W` latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Latent {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "latent buffer of {} for {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_mask(mask: &MaskGrid) -> Self {
        let data = mask.data().iter().map(|&m| f64::from(m)).collect();
        Self { channels: 1, height: mask.height(), width: mask.width(), data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    fn same_grid(&self, other: &Latent) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(format!(
                "latent grids {}x{} and {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Channel concatenation.
    pub fn stack(parts: &[&Latent]) -> Result<Latent> {
        let first = parts.first().ok_or_else(|| Error::shape("nothing to stack"))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            first.same_grid(p)?;
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Latent::new(channels, first.height, first.width, data)
    }

    /// Channels `[start, start + count)`.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Latent> {
        if start + count > self.channels {
            return Err(Error::shape(format!("channels {start}..{} of {}", start + count, self.channels)));
        }
        let p = self.plane();
        Latent::new(count, self.height, self.width, self.data[start * p..(start + count) * p].to_vec())
    }

    /// Multiplies every channel by `(1 − M)`.
    pub fn zero_masked(&self, mask: &Latent) -> Result<Latent> {
        self.same_grid(mask)?;
        if mask.channels != 1 {
            return Err(Error::shape("mask latent must have one channel"));
        }
        let p = self.plane();
        let mut out = self.clone();
        for c in 0..self.channels {
            for (v, m) in out.data[c * p..(c + 1) * p].iter_mut().zip(&mask.data) {
                *v *= 1.0 - m;
            }
        }
        Ok(out)
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Maps pixel canvases to latents and back.
pub trait Autoencoder {
    /// Pixel side length per latent cell.
    fn factor(&self) -> usize;
    fn latent_channels(&self, image_channels: usize) -> usize;
    fn encode(&self, image: &ImageCanvas) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<ImageCanvas>;
}

/// Identity autoencoder: the latent is the image rescaled to [−1, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PixelSpace;

pub fn to_signed(v: f64) -> f64 {
    2.0 * v - 1.0
}

pub fn to_unit(v: f64) -> f64 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}

impl Autoencoder for PixelSpace {
    fn factor(&self) -> usize {
        1
    }

    fn latent_channels(&self, image_channels: usize) -> usize {
        image_channels
    }

    fn encode(&self, image: &ImageCanvas) -> Result<Latent> {
        let data = image.data().iter().map(|&v| to_signed(v)).collect();
        Latent::new(image.channels(), image.height(), image.width(), data)
    }

    fn decode(&self, latent: &Latent) -> Result<ImageCanvas> {
        let data = latent.data.iter().map(|&v| to_unit(v)).collect();
        ImageCanvas::new(latent.height, latent.width, latent.channels, data)
    }
}

/// `[z_t; z_0 ⊙ (1 − M); M]`
pub fn build_inpaint_input(z_t: &Latent, z0: &Latent, mask: &Latent) -> Result<Latent> {
    if z_t.shape() != z0.shape() {
        return Err(Error::shape("z_t and z_0 differ in shape"));
    }
    let known = z0.zero_masked(mask)?;
    Latent::stack(&[z_t, &known, mask])
}

/// Fixed conditioning channels of a stitched canvas: the known latent and the latent mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintContext {
    pub z0: Latent,
    /// `ẑ_0`, the second block of the denoiser input.
    pub known: Latent,
    pub mask: Latent,
}

impl InpaintContext {
    pub fn new(stitched: &StitchedCanvas, ae: &dyn Autoencoder) -> Result<Self> {
        if stitched.mask.is_empty() {
            return Err(Error::EmptyMask("nothing to generate".into()));
        }
        let z0 = ae.encode(&stitched.canvas)?;
        let mask = Latent::from_mask(&stitched.mask.resize_nearest(z0.height(), z0.width()));
        // The low-resolution base of the target pane stays visible for super-resolution.
        let known = if stitched.task == TaskKind::LocalSr { z0.clone() } else { z0.zero_masked(&mask)? };
        Ok(Self { z0, known, mask })
    }

    pub fn input(&self, z_t: &Latent) -> Result<Latent> {
        Latent::stack(&[z_t, &self.known, &self.mask])
    }
}

/// A noise predictor over the stacked input.
pub trait Denoiser {
    type Cond;

    /// Predicts the noise in the first block of `stack`; the output has the
    /// shape of that block.
    fn predict_noise(&self, stack: &Latent, t: usize, cond: &Self::Cond) -> Result<Latent>;
}
