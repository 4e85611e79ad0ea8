//! Image panes, binary masks, and the side-by-side canvas arithmetic.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::adapters::FreezePolicy;
use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct Seed(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TaskKind {
    Inpaint,
    Outpaint,
    RefInpaint,
    LocalSr,
    Nvs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFamily {
    InpaintingBased,
    VisualConditioned,
    MultimodalConditioned,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Inpaint,
        TaskKind::Outpaint,
        TaskKind::RefInpaint,
        TaskKind::LocalSr,
        TaskKind::Nvs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Inpaint => "inpaint",
            TaskKind::Outpaint => "outpaint",
            TaskKind::RefInpaint => "ref_inpaint",
            TaskKind::LocalSr => "local_sr",
            TaskKind::Nvs => "nvs",
        }
    }

    pub fn family(self) -> TaskFamily {
        match self {
            TaskKind::Inpaint | TaskKind::Outpaint | TaskKind::RefInpaint => {
                TaskFamily::InpaintingBased
            }
            TaskKind::LocalSr => TaskFamily::VisualConditioned,
            TaskKind::Nvs => TaskFamily::MultimodalConditioned,
        }
    }

    /// Whether the canvas carries a reference pane on the left.
    pub fn is_two_pane(self) -> bool {
        !matches!(self, TaskKind::Inpaint | TaskKind::Outpaint)
    }

    /// Length of the conditioning sequence fed to the text encoder.
    pub fn default_sequence_length(self) -> usize {
        match self {
            TaskKind::Nvs => 73,
            _ => 50,
        }
    }

    /// Trainable prompt rows; for nvs one slot of the sequence is the pose token.
    pub fn default_prompt_rows(self) -> usize {
        match self {
            TaskKind::Nvs => 72,
            _ => 50,
        }
    }

    pub fn default_freeze_policy(self) -> FreezePolicy {
        match self.family() {
            TaskFamily::InpaintingBased => FreezePolicy::PromptOnly,
            TaskFamily::VisualConditioned => FreezePolicy::LoraPlusFirstConv,
            TaskFamily::MultimodalConditioned => FreezePolicy::FullFinetune,
        }
    }

    /// Learning rate for prompt embeddings and adapter factors.
    pub fn default_prompt_lr(self) -> f64 {
        match self.family() {
            TaskFamily::InpaintingBased => 3e-5,
            _ => 1e-4,
        }
    }

    /// Sentence whose token embeddings seed the prompt for token-based init.
    pub fn description(self) -> &'static str {
        match self {
            TaskKind::Inpaint | TaskKind::Outpaint => {
                "Inpaint the given image with visually coherent and high-fidelity background and texture"
            }
            TaskKind::RefInpaint => {
                "The whole image is split into two parts with the same size, they share the same \
                 scene/landmark captured with different viewpoints and times"
            }
            TaskKind::LocalSr => {
                "The right image is the magnified high-resolution patch of the left image's red square"
            }
            TaskKind::Nvs => {
                "Left is the reference image, while the right one is the target image with a \
                 different viewpoint. The relative pose:"
            }
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTask(s.into()))
    }
}

/// A planar (channel-major) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCanvas {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::shape(format!(
            "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::shape(format!("{channels} channels (expected 1 or 3)")));
    }
    Ok(())
}

impl ImageCanvas {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Fills a pane with a per-channel colour.
    pub fn solid(height: usize, width: usize, color: &[f64]) -> Result<Self> {
        let channels = color.len();
        let mut data = Vec::with_capacity(height * width * channels);
        for &c in color {
            data.extend(core::iter::repeat(c).take(height * width));
        }
        Self::new(height, width, channels, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageCanvas) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Sets one sample; values outside `[0, 1]` are rejected.
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        self.data[(c * self.height + y) * self.width + x] = v;
        Ok(())
    }

    /// Zeroes every pixel where `mask` is 1.
    pub fn masked(&self, mask: &MaskGrid) -> Result<ImageCanvas> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::shape(format!(
                "mask {}x{} vs image {}x{}",
                mask.height(),
                mask.width(),
                self.height,
                self.width
            )));
        }
        let mut out = self.clone();
        let plane = self.height * self.width;
        for c in 0..self.channels {
            for (i, &m) in mask.data().iter().enumerate() {
                if m == 1 {
                    out.data[c * plane + i] = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// Takes pixels from `fill` where `mask` is 1 and from `self` elsewhere.
    pub fn composite(&self, fill: &ImageCanvas, mask: &MaskGrid) -> Result<ImageCanvas> {
        if !self.same_shape(fill) || mask.height() != self.height || mask.width() != self.width {
            return Err(Error::shape("composite operands disagree in shape"));
        }
        let plane = self.height * self.width;
        let mut out = self.clone();
        for c in 0..self.channels {
            for (i, &m) in mask.data().iter().enumerate() {
                if m == 1 {
                    out.data[c * plane + i] = fill.data[c * plane + i];
                }
            }
        }
        Ok(out)
    }

    /// Copies the `h`×`w` window starting at `(y, x)` into a raw planar buffer.
    pub fn crop_raw(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Vec<f64>> {
        if y + h > self.height || x + w > self.width || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "crop {h}x{w}@({y},{x}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(h * w * self.channels);
        for c in 0..self.channels {
            for yy in y..y + h {
                let row = (c * self.height + yy) * self.width;
                out.extend_from_slice(&self.data[row + x..row + x + w]);
            }
        }
        Ok(out)
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<ImageCanvas> {
        let data = self.crop_raw(y, x, h, w)?;
        ImageCanvas::new(h, w, self.channels, data)
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<ImageCanvas> {
        let data = bilinear_resize(&self.data, self.channels, self.height, self.width, height, width);
        ImageCanvas::new(height, width, self.channels, data)
    }
}

/// Bilinear resampling of a planar buffer with half-pixel centres and edge clamping.
pub fn bilinear_resize(
    src: &[f64],
    channels: usize,
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let taps = |dst: usize, src_n: usize| -> Vec<(usize, usize, f64)> {
        let scale = src_n as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (libm::floor(pos) as usize).min(src_n - 1);
                let i1 = (i0 + 1).min(src_n - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = taps(dst_h, src_h);
    let xs = taps(dst_w, src_w);
    let mut out = Vec::with_capacity(channels * dst_h * dst_w);
    for c in 0..channels {
        let plane = &src[c * src_h * src_w..(c + 1) * src_h * src_w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * src_w + x0] * (1.0 - fx) + plane[y0 * src_w + x1] * fx;
                let bot = plane[y1 * src_w + x0] * (1.0 - fx) + plane[y1 * src_w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Places `left` and `right` side by side.
pub fn pane_concat(left: &ImageCanvas, right: &ImageCanvas) -> Result<ImageCanvas> {
    if left.height != right.height || left.channels != right.channels {
        return Err(Error::shape(format!(
            "cannot concatenate {}x{}x{} with {}x{}x{}",
            left.height, left.width, left.channels, right.height, right.width, right.channels
        )));
    }
    let (h, wl, wr) = (left.height, left.width, right.width);
    let width = wl + wr;
    let mut data = Vec::with_capacity(h * width * left.channels);
    for c in 0..left.channels {
        for y in 0..h {
            let l = (c * h + y) * wl;
            let r = (c * h + y) * wr;
            data.extend_from_slice(&left.data[l..l + wl]);
            data.extend_from_slice(&right.data[r..r + wr]);
        }
    }
    Ok(ImageCanvas { height: h, width, channels: left.channels, data })
}

/// Splits a stitched canvas into its left (reference) and right (target) panes.
pub fn pane_split(canvas: &ImageCanvas) -> Result<(ImageCanvas, ImageCanvas)> {
    if canvas.width % 2 != 0 {
        return Err(Error::shape(format!("odd canvas width {}", canvas.width)));
    }
    let half = canvas.width / 2;
    Ok((canvas.crop(0, 0, canvas.height, half)?, canvas.crop(0, half, canvas.height, half)?))
}

/// Binary mask; 1 marks pixels to generate, 0 marks known pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{} values for a {height}x{width} mask", data.len())));
        }
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn same_shape(&self, other: &MaskGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn union(&self, other: &MaskGrid) -> Result<MaskGrid> {
        if !self.same_shape(other) {
            return Err(Error::shape("mask union of different shapes"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Ok(MaskGrid { height: self.height, width: self.width, data })
    }

    pub fn is_superset_of(&self, other: &MaskGrid) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(a, b)| a >= b)
    }

    /// `(y0, x0, y1, x1)` with exclusive upper bounds, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                    });
                }
            }
        }
        bb
    }

    /// Places two masks side by side.
    pub fn concat(left: &MaskGrid, right: &MaskGrid) -> Result<MaskGrid> {
        if left.height != right.height {
            return Err(Error::shape("mask heights differ"));
        }
        let width = left.width + right.width;
        let mut data = Vec::with_capacity(left.height * width);
        for y in 0..left.height {
            data.extend_from_slice(&left.data[y * left.width..(y + 1) * left.width]);
            data.extend_from_slice(&right.data[y * right.width..(y + 1) * right.width]);
        }
        Ok(MaskGrid { height: left.height, width, data })
    }

    pub fn split(&self) -> Result<(MaskGrid, MaskGrid)> {
        if self.width % 2 != 0 {
            return Err(Error::shape(format!("odd mask width {}", self.width)));
        }
        let half = self.width / 2;
        let left = MaskGrid::from_fn(self.height, half, |y, x| self.get(y, x));
        let right = MaskGrid::from_fn(self.height, half, |y, x| self.get(y, x + half));
        Ok((left, right))
    }

    /// Nearest-neighbour resampling (used to bring masks to latent scale).
    pub fn resize_nearest(&self, height: usize, width: usize) -> MaskGrid {
        MaskGrid::from_fn(height, width, |y, x| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sy, sx)
        })
    }
}
