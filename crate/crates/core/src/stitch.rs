//! Task-specific composition of the stitched model input.
//!
//! Two-pane tasks put the reference on the left and the (masked) target on
//! the right; plain inpainting and outpainting use a single pane. The mask
//! always spans the whole canvas and is zero over the reference pane.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::canvas::{pane_concat, ImageCanvas, MaskGrid, Seed, TaskKind};
use crate::error::{Error, Result};
use crate::pose::RelativePose;
use crate::rng::seeded_rng;

/// Patch location inside the reference pane, in pane pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PatchBox {
    pub fn validate(&self, pane_h: usize, pane_w: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.x + self.w > pane_w || self.y + self.h > pane_h {
            return Err(Error::shape(format!(
                "patch box {}x{}@({},{}) outside the {pane_h}x{pane_w} pane",
                self.w, self.h, self.x, self.y
            )));
        }
        if self.w * pane_h != self.h * pane_w {
            return Err(Error::shape(format!(
                "patch box aspect {}:{} differs from pane aspect {pane_w}:{pane_h}",
                self.w, self.h
            )));
        }
        Ok(())
    }
}

/// Task payload carried from composition to the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TaskMeta {
    #[default]
    None,
    Patch(PatchBox),
    Pose(RelativePose),
}

impl TaskMeta {
    pub fn pose(&self) -> Option<&RelativePose> {
        match self {
            TaskMeta::Pose(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchedCanvas {
    pub canvas: ImageCanvas,
    /// Full-canvas mask, 1 = generate.
    pub mask: MaskGrid,
    pub task: TaskKind,
    pub meta: TaskMeta,
}

impl StitchedCanvas {
    pub fn pane_width(&self) -> usize {
        if self.task.is_two_pane() {
            self.canvas.width() / 2
        } else {
            self.canvas.width()
        }
    }
}

/// Frame drawn around the local-SR patch in the reference pane.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameStyle {
    pub width: usize,
    pub color: [f64; 3],
}

impl Default for FrameStyle {
    fn default() -> Self {
        Self { width: 3, color: [1.0, 0.0, 0.0] }
    }
}

impl FrameStyle {
    /// Default style with the width scaled from 256-pixel panes to `side`.
    pub fn for_side(side: usize) -> Self {
        let width = libm::round(3.0 * side as f64 / 256.0).max(1.0) as usize;
        Self { width, ..Self::default() }
    }
}

/// How the masked part of the view-synthesis target pane is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MaskFill {
    #[default]
    Zero,
    Noise,
}

fn require_nonempty(mask: &MaskGrid) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::EmptyMask("nothing to generate".into()));
    }
    Ok(())
}

pub fn compose_ref_inpaint(reference: &ImageCanvas, target: &ImageCanvas, mask: &MaskGrid) -> Result<StitchedCanvas> {
    if !reference.same_shape(target) {
        return Err(Error::shape("reference and target panes differ in shape"));
    }
    let (h, w) = (target.height(), target.width());
    let target_mask = if mask.height() == h && mask.width() == 2 * w {
        let (left, right) = mask.split()?;
        if !left.is_empty() {
            return Err(Error::invalid("mask overlaps the reference pane"));
        }
        right
    } else if mask.height() == h && mask.width() == w {
        mask.clone()
    } else {
        return Err(Error::shape(format!("mask {}x{} matches neither pane nor canvas", mask.height(), mask.width())));
    };
    require_nonempty(&target_mask)?;
    let canvas = pane_concat(reference, &target.masked(&target_mask)?)?;
    let mask = MaskGrid::concat(&MaskGrid::zeros(h, w), &target_mask)?;
    Ok(StitchedCanvas { canvas, mask, task: TaskKind::RefInpaint, meta: TaskMeta::None })
}

fn frame_value(color: &[f64; 3], channels: usize, c: usize) -> f64 {
    if channels == 1 {
        0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2]
    } else {
        color[c]
    }
}

/// Reference pane with an inner frame along `patch`.
pub fn draw_frame(image: &ImageCanvas, patch: &PatchBox, style: &FrameStyle) -> Result<ImageCanvas> {
    patch.validate(image.height(), image.width())?;
    let fw = style.width;
    if fw == 0 || 2 * fw >= patch.w.min(patch.h) {
        return Err(Error::invalid(format!(
            "frame width {fw} does not fit inside a {}x{} patch",
            patch.w, patch.h
        )));
    }
    let mut out = image.clone();
    for y in patch.y..patch.y + patch.h {
        for x in patch.x..patch.x + patch.w {
            let edge = x < patch.x + fw || x >= patch.x + patch.w - fw || y < patch.y + fw || y >= patch.y + patch.h - fw;
            if edge {
                for c in 0..image.channels() {
                    out.set(c, y, x, frame_value(&style.color, image.channels(), c))?;
                }
            }
        }
    }
    Ok(out)
}

/// Frames the patch on the reference and puts its bilinear upsample on the right.
pub fn compose_local_sr(reference: &ImageCanvas, patch: &PatchBox, style: &FrameStyle) -> Result<StitchedCanvas> {
    let (h, w) = (reference.height(), reference.width());
    let left = draw_frame(reference, patch, style)?;
    let crop = reference.crop_raw(patch.y, patch.x, patch.h, patch.w)?;
    let up = crate::canvas::bilinear_resize(&crop, reference.channels(), patch.h, patch.w, h, w);
    let right = ImageCanvas::new(h, w, reference.channels(), up)?;
    let canvas = pane_concat(&left, &right)?;
    let mask = MaskGrid::concat(&MaskGrid::zeros(h, w), &MaskGrid::ones(h, w))?;
    Ok(StitchedCanvas { canvas, mask, task: TaskKind::LocalSr, meta: TaskMeta::Patch(*patch) })
}

/// Reference view on the left, background target pane with the mask applied on the right.
pub fn compose_nvs(
    reference: &ImageCanvas,
    target_mask: &MaskGrid,
    pose: RelativePose,
    background: &[f64],
    fill: MaskFill,
    seed: Seed,
) -> Result<StitchedCanvas> {
    let (h, w) = (reference.height(), reference.width());
    if target_mask.height() != h || target_mask.width() != w {
        return Err(Error::shape("target mask does not match the reference pane"));
    }
    if background.len() != reference.channels() {
        return Err(Error::shape("background colour has the wrong channel count"));
    }
    require_nonempty(target_mask)?;
    let bg = ImageCanvas::solid(h, w, background)?;
    let right = match fill {
        MaskFill::Zero => bg.masked(target_mask)?,
        MaskFill::Noise => {
            let mut rng = seeded_rng(seed, "nvs-fill");
            let noise: Vec<f64> = (0..h * w * reference.channels()).map(|_| rng.random_range(0.0..=1.0)).collect();
            bg.composite(&ImageCanvas::new(h, w, reference.channels(), noise)?, target_mask)?
        }
    };
    let canvas = pane_concat(reference, &right)?;
    let mask = MaskGrid::concat(&MaskGrid::zeros(h, w), target_mask)?;
    Ok(StitchedCanvas { canvas, mask, task: TaskKind::Nvs, meta: TaskMeta::Pose(pose) })
}

/// Single-pane inpainting or outpainting input.
pub fn compose_plain(image: &ImageCanvas, mask: &MaskGrid, task: TaskKind) -> Result<StitchedCanvas> {
    if task.is_two_pane() {
        return Err(Error::invalid(format!("{task} is not a single-pane task")));
    }
    require_nonempty(mask)?;
    let canvas = image.masked(mask)?;
    Ok(StitchedCanvas { canvas, mask: mask.clone(), task, meta: TaskMeta::None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::pane_split;
    use crate::masks::{gen_irregular_mask, gen_outpaint_mask_with_layout, IrregularParams, OutpaintLayout};
    use rand::Rng;

    fn noise_image(seed: u64, h: usize, w: usize, c: usize) -> ImageCanvas {
        let mut rng = seeded_rng(Seed(seed), "img");
        ImageCanvas::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..=1.0)).unwrap()
    }

    #[test]
    fn ref_inpaint_layout_and_zero_fill() {
        let r = noise_image(1, 32, 32, 3);
        let t = noise_image(2, 32, 32, 3);
        let m = gen_irregular_mask(32, 32, Seed(3), &IrregularParams::default()).unwrap();
        let s = compose_ref_inpaint(&r, &t, &m).unwrap();
        assert_eq!((s.canvas.height(), s.canvas.width()), (32, 64));
        let (lm, rm) = s.mask.split().unwrap();
        assert!(lm.is_empty());
        assert_eq!(rm, m);
        let (left, right) = pane_split(&s.canvas).unwrap();
        assert_eq!(left, r);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let expect = if m.get(y, x) { 0.0 } else { t.get(c, y, x) };
                    assert_eq!(right.get(c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn ref_inpaint_rejects_empty_and_overlapping_masks() {
        let r = noise_image(1, 16, 16, 1);
        assert!(matches!(compose_ref_inpaint(&r, &r, &MaskGrid::zeros(16, 16)), Err(Error::EmptyMask(_))));
        let mut full = MaskGrid::zeros(16, 32);
        full.set(3, 3, true);
        full.set(3, 20, true);
        assert!(compose_ref_inpaint(&r, &r, &full).is_err());
    }

    #[test]
    fn local_sr_upsamples_patch() {
        let r = noise_image(4, 256, 256, 3);
        let patch = PatchBox { x: 64, y: 32, w: 64, h: 64 };
        let s = compose_local_sr(&r, &patch, &FrameStyle::default()).unwrap();
        let (left, right) = pane_split(&s.canvas).unwrap();
        assert_eq!(left.get(0, 32, 64), 1.0);
        assert_eq!(left.get(1, 32, 64), 0.0);
        assert_eq!(left.get(0, 0, 0), r.get(0, 0, 0));
        let crop = r.crop(32, 64, 64, 64).unwrap();
        assert_eq!(right, crop.resize_bilinear(256, 256).unwrap());
        let (lm, rm) = s.mask.split().unwrap();
        assert!(lm.is_empty());
        assert_eq!(rm.count(), 256 * 256);
        assert_eq!(s.meta, TaskMeta::Patch(patch));
    }

    #[test]
    fn local_sr_whole_pane_box_copies_reference() {
        let r = noise_image(5, 32, 32, 3);
        let patch = PatchBox { x: 0, y: 0, w: 32, h: 32 };
        let s = compose_local_sr(&r, &patch, &FrameStyle::for_side(32)).unwrap();
        let (left, right) = pane_split(&s.canvas).unwrap();
        assert_eq!(right, r);
        for y in 1..31 {
            for x in 1..31 {
                assert_eq!(left.get(0, y, x), right.get(0, y, x));
            }
        }
    }

    #[test]
    fn local_sr_rejects_bad_boxes() {
        let r = noise_image(5, 32, 32, 3);
        let style = FrameStyle::default();
        assert!(compose_local_sr(&r, &PatchBox { x: 20, y: 0, w: 16, h: 16 }, &style).is_err());
        assert!(compose_local_sr(&r, &PatchBox { x: 0, y: 0, w: 16, h: 8 }, &style).is_err());
        assert!(compose_local_sr(&r, &PatchBox { x: 0, y: 0, w: 6, h: 6 }, &style).is_err());
    }

    #[test]
    fn nvs_background_is_exact() {
        let r = noise_image(6, 32, 32, 3);
        let m = MaskGrid::from_fn(32, 32, |y, x| (8..24).contains(&y) && (10..20).contains(&x));
        let s = compose_nvs(&r, &m, RelativePose::identity(), &[1.0, 1.0, 1.0], MaskFill::Zero, Seed(0)).unwrap();
        let (left, right) = pane_split(&s.canvas).unwrap();
        assert_eq!(left, r);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(right.get(c, y, x), if m.get(y, x) { 0.0 } else { 1.0 });
                }
            }
        }
        assert!(compose_nvs(&r, &MaskGrid::zeros(32, 32), RelativePose::identity(), &[1.0; 3], MaskFill::Zero, Seed(0)).is_err());
        let noisy = compose_nvs(&r, &m, RelativePose::identity(), &[1.0; 3], MaskFill::Noise, Seed(1)).unwrap();
        assert_eq!(noisy.mask, s.mask);
    }

    #[test]
    fn plain_preserves_known_pixels() {
        let img = noise_image(7, 64, 64, 3);
        let m = gen_outpaint_mask_with_layout(64, 64, 0.5, OutpaintLayout::Both).unwrap();
        let s = compose_plain(&img, &m, TaskKind::Outpaint).unwrap();
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let v = s.canvas.get(c, y, x);
                    if m.get(y, x) {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v.to_bits(), img.get(c, y, x).to_bits());
                    }
                }
            }
        }
        assert!(compose_plain(&img, &m, TaskKind::Nvs).is_err());
        assert!(compose_plain(&img, &MaskGrid::zeros(64, 64), TaskKind::Inpaint).is_err());
    }
}
