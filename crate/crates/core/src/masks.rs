//! Mask synthesis: free-form strokes, match-guided polygons, outpainting
//! borders, and dilated object masks for view synthesis.
//!
//! All generators are pure functions of their inputs and a [`Seed`], and
//! every grid they return holds only 0 and 1 (1 = generate).

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::canvas::{MaskGrid, Seed};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, StreamRng};

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: PartialOrd + Copy> Interval<T> {
    pub const fn new(lo: T, hi: T) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: T) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn is_ordered(&self) -> bool {
        self.lo <= self.hi
    }
}

impl Interval<f64> {
    fn sample(&self, rng: &mut StreamRng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

impl Interval<usize> {
    fn sample(&self, rng: &mut StreamRng) -> usize {
        rng.random_range(self.lo..=self.hi)
    }
}

/// One correspondence between the reference and target panes, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub ref_point: (f64, f64),
    pub tar_point: (f64, f64),
    pub confidence: f64,
}

/// Matcher output for one image pair; may be empty for degenerate pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn new(matches: Vec<Match>) -> Self {
        Self { matches }
    }

    /// Checks every point lies within a pane of `h`×`w` pixels.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let inside = |(x, y): (f64, f64)| x >= 0.0 && y >= 0.0 && x <= w as f64 && y <= h as f64;
        for (i, m) in self.matches.iter().enumerate() {
            if !inside(m.ref_point) || !inside(m.tar_point) {
                return Err(Error::invalid(format!("match {i} lies outside the {h}x{w} pane")));
            }
            if !(0.0..=1.0).contains(&m.confidence) {
                return Err(Error::invalid(format!("match {i} confidence {}", m.confidence)));
            }
        }
        Ok(())
    }

    pub fn confident(&self, threshold: f64) -> Vec<(f64, f64)> {
        self.matches
            .iter()
            .filter(|m| m.confidence >= threshold)
            .map(|m| m.tar_point)
            .collect()
    }
}

/// Parameters of match-guided masks. Stroke widths are fractions of `min(h, w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskParams {
    pub vertex_count_range: Interval<usize>,
    pub crop_fraction_range: Interval<f64>,
    pub stroke_width_range: Interval<f64>,
    pub confidence_threshold: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            vertex_count_range: Interval::new(15, 30),
            crop_fraction_range: Interval::new(0.2, 0.5),
            stroke_width_range: Interval::new(0.02, 0.08),
            confidence_threshold: 0.8,
        }
    }
}

fn check_fraction_interval(name: &str, iv: &Interval<f64>) -> Result<()> {
    if !iv.is_ordered() || iv.lo <= 0.0 || iv.hi > 1.0 {
        return Err(Error::invalid(format!("{name} [{}, {}] must satisfy 0 < lo <= hi <= 1", iv.lo, iv.hi)));
    }
    Ok(())
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if !self.vertex_count_range.is_ordered() || self.vertex_count_range.lo == 0 {
            return Err(Error::invalid("vertex_count_range must be a non-empty positive interval"));
        }
        check_fraction_interval("crop_fraction_range", &self.crop_fraction_range)?;
        check_fraction_interval("stroke_width_range", &self.stroke_width_range)?;
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::invalid("confidence_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Shape parameters of free-form masks; widths and radii are fractions of `min(h, w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IrregularParams {
    pub fraction_range: Interval<f64>,
    pub stroke_count: Interval<usize>,
    pub vertices_per_stroke: Interval<usize>,
    pub segment_length: Interval<f64>,
    pub stroke_width: Interval<f64>,
    pub ellipse_count: Interval<usize>,
    pub ellipse_radius: Interval<f64>,
    pub max_attempts: usize,
}

impl Default for IrregularParams {
    fn default() -> Self {
        Self {
            fraction_range: Interval::new(0.05, 0.6),
            stroke_count: Interval::new(1, 4),
            vertices_per_stroke: Interval::new(4, 10),
            segment_length: Interval::new(0.1, 0.3),
            stroke_width: Interval::new(0.06, 0.18),
            ellipse_count: Interval::new(0, 2),
            ellipse_radius: Interval::new(0.06, 0.2),
            max_attempts: 200,
        }
    }
}

/// Parameters of view-synthesis masks. Kernel sizes are in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NvsMaskParams {
    pub kernel_range: Interval<usize>,
    pub box_enlarge_range: Interval<f64>,
    pub point_count_range: Interval<usize>,
    pub stroke_width_range: Interval<f64>,
}

impl Default for NvsMaskParams {
    fn default() -> Self {
        Self {
            kernel_range: Interval::new(10, 25),
            box_enlarge_range: Interval::new(0.05, 0.2),
            point_count_range: Interval::new(20, 45),
            stroke_width_range: Interval::new(0.02, 0.08),
        }
    }
}

impl NvsMaskParams {
    /// Defaults with the dilation kernel rescaled from 256-pixel panes to `side`.
    pub fn for_side(side: usize) -> Self {
        let scale = side as f64 / 256.0;
        let mut p = Self::default();
        let lo = libm::round(p.kernel_range.lo as f64 * scale).max(1.0) as usize;
        let hi = libm::round(p.kernel_range.hi as f64 * scale).max(lo as f64) as usize;
        p.kernel_range = Interval::new(lo, hi.max(lo | 1));
        p
    }
}

// --- rasterisation -------------------------------------------------------

/// Paints every pixel whose centre is within `width / 2` of segment `a`–`b`
/// (at least half a pixel), plus the pixels holding the endpoints.
pub fn paint_segment(mask: &mut MaskGrid, a: (f64, f64), b: (f64, f64), width: f64) {
    let r = (width / 2.0).max(0.5);
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    let x0 = libm::floor(a.0.min(b.0) - r).max(0.0) as usize;
    let x1 = (libm::ceil(a.0.max(b.0) + r).min(w)) as usize;
    let y0 = libm::floor(a.1.min(b.1) - r).max(0.0) as usize;
    let y1 = (libm::ceil(a.1.max(b.1) + r).min(h)) as usize;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            if cx * cx + cy * cy <= r * r {
                mask.set(y, x, true);
            }
        }
    }
    for p in [a, b] {
        let (x, y) = (libm::floor(p.0), libm::floor(p.1));
        if x >= 0.0 && y >= 0.0 && x < w && y < h {
            mask.set(y as usize, x as usize, true);
        }
    }
}

/// Scanline fill under the nonzero winding rule, sampling pixel centres.
pub fn fill_polygon(mask: &mut MaskGrid, vertices: &[(f64, f64)]) {
    let n = vertices.len();
    if n < 3 {
        return;
    }
    let mut crossings: Vec<(f64, i32)> = Vec::new();
    for y in 0..mask.height() {
        let cy = y as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            let (lo, hi) = if a.1 <= b.1 { (a.1, b.1) } else { (b.1, a.1) };
            if a.1 == b.1 || cy < lo || cy >= hi {
                continue;
            }
            let x = a.0 + (cy - a.1) * (b.0 - a.0) / (b.1 - a.1);
            crossings.push((x, if b.1 > a.1 { 1 } else { -1 }));
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(|p, q| p.0.total_cmp(&q.0));
        // Winding of a pixel centre = sum of directions of crossings to its right.
        let mut winding: i32 = crossings.iter().map(|c| c.1).sum();
        let mut next = 0;
        for x in 0..mask.width() {
            let cx = x as f64 + 0.5;
            while next < crossings.len() && crossings[next].0 <= cx {
                winding -= crossings[next].1;
                next += 1;
            }
            if winding != 0 {
                mask.set(y, x, true);
            }
        }
    }
}

pub fn fill_ellipse(mask: &mut MaskGrid, center: (f64, f64), radii: (f64, f64)) {
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let u = (x as f64 + 0.5 - center.0) / radii.0;
            let v = (y as f64 + 0.5 - center.1) / radii.1;
            if u * u + v * v <= 1.0 {
                mask.set(y, x, true);
            }
        }
    }
}

// --- generators -----------------------------------------------------------

fn check_pane(h: usize, w: usize, min: usize) -> Result<()> {
    if h < min || w < min {
        return Err(Error::shape(format!("pane {h}x{w} smaller than {min}x{min}")));
    }
    Ok(())
}

/// Free-form mask: random-walk thick strokes plus filled ellipses, redrawn
/// until the masked fraction lands inside `params.fraction_range`.
pub fn gen_irregular_mask(h: usize, w: usize, seed: Seed, params: &IrregularParams) -> Result<MaskGrid> {
    check_pane(h, w, 16)?;
    let side = h.min(w) as f64;
    for attempt in 0..params.max_attempts {
        let mut rng = seeded_rng(derive_seed(seed, "irregular", attempt as u64), "irregular-mask");
        let mut mask = MaskGrid::zeros(h, w);
        for _ in 0..params.stroke_count.sample(&mut rng) {
            let width = params.stroke_width.sample(&mut rng) * side;
            let mut p = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let mut angle: f64 = rng.random_range(0.0..core::f64::consts::TAU);
            for _ in 0..params.vertices_per_stroke.sample(&mut rng) {
                angle += rng.random_range(-core::f64::consts::FRAC_PI_2..core::f64::consts::FRAC_PI_2);
                let len = params.segment_length.sample(&mut rng) * side;
                let q = (
                    (p.0 + len * libm::cos(angle)).clamp(0.0, w as f64 - 1e-9),
                    (p.1 + len * libm::sin(angle)).clamp(0.0, h as f64 - 1e-9),
                );
                paint_segment(&mut mask, p, q, width);
                p = q;
            }
        }
        for _ in 0..params.ellipse_count.sample(&mut rng) {
            let c = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let r = (params.ellipse_radius.sample(&mut rng) * side, params.ellipse_radius.sample(&mut rng) * side);
            fill_ellipse(&mut mask, c, r);
        }
        if params.fraction_range.contains(mask.fraction()) {
            return Ok(mask);
        }
    }
    Err(Error::MaskConstraint {
        constraint: format!(
            "masked fraction within [{}, {}]",
            params.fraction_range.lo, params.fraction_range.hi
        ),
        attempts: params.max_attempts,
    })
}

/// Sampling record of a match-guided mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingTrace {
    pub survivors: usize,
    /// Bounding box of confident target points, `(x0, y0, x1, y1)`.
    pub match_box: (f64, f64, f64, f64),
    /// Cropped sub-box, `(x0, y0, x1, y1)`.
    pub crop_box: (f64, f64, f64, f64),
    pub crop_fraction: f64,
    pub vertices: Vec<(f64, f64)>,
    pub stroke_widths: Vec<f64>,
}

pub fn gen_matching_mask(matches: &MatchSet, h: usize, w: usize, seed: Seed, params: &MaskParams) -> Result<MaskGrid> {
    gen_matching_mask_traced(matches, h, w, seed, params).map(|(m, _)| m)
}

/// Match-guided mask: confident target points, a random sub-box of their
/// bounding box, and a filled closed polyline through sampled vertices.
pub fn gen_matching_mask_traced(
    matches: &MatchSet,
    h: usize,
    w: usize,
    seed: Seed,
    params: &MaskParams,
) -> Result<(MaskGrid, MatchingTrace)> {
    params.validate()?;
    let points = matches.confident(params.confidence_threshold);
    if points.len() < 4 {
        return Err(Error::NotEnoughMatches { found: points.len(), threshold: params.confidence_threshold });
    }
    let mut rng = seeded_rng(seed, "matching-mask");
    let (mut bx0, mut by0, mut bx1, mut by1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        bx0 = bx0.min(x);
        by0 = by0.min(y);
        bx1 = bx1.max(x);
        by1 = by1.max(y);
    }
    let (bw, bh) = (bx1 - bx0, by1 - by0);

    let mut best: Option<((f64, f64, f64, f64), f64, Vec<(f64, f64)>)> = None;
    for _ in 0..64 {
        let frac = params.crop_fraction_range.sample(&mut rng);
        let sx = if frac < 1.0 { rng.random_range(frac..=1.0) } else { 1.0 };
        let sy = frac / sx;
        let (cw, ch) = (bw * sx, bh * sy);
        let cx0 = bx0 + if bw > cw { rng.random_range(0.0..=bw - cw) } else { 0.0 };
        let cy0 = by0 + if bh > ch { rng.random_range(0.0..=bh - ch) } else { 0.0 };
        let crop = (cx0, cy0, cx0 + cw, cy0 + ch);
        let inside: Vec<(f64, f64)> = points
            .iter()
            .copied()
            .filter(|&(x, y)| x >= crop.0 && x <= crop.2 && y >= crop.1 && y <= crop.3)
            .collect();
        let better = best.as_ref().map_or(true, |b| inside.len() > b.2.len());
        let done = inside.len() >= 3;
        if better {
            best = Some((crop, frac, inside));
        }
        if done {
            break;
        }
    }
    let (crop_box, crop_fraction, inside) = best.expect("at least one crop attempt");
    if inside.is_empty() {
        return Err(Error::MaskConstraint {
            constraint: "a cropped sub-box containing confident matches".to_string(),
            attempts: 64,
        });
    }

    let k = params.vertex_count_range.sample(&mut rng);
    let mut vertices: Vec<(f64, f64)> = if inside.len() >= k {
        let mut pool = inside.clone();
        pool.partial_shuffle(&mut rng, k);
        pool.truncate(k);
        pool
    } else {
        (0..k).map(|_| inside[rng.random_range(0..inside.len())]).collect()
    };
    vertices.shuffle(&mut rng);

    let side = h.min(w) as f64;
    let mut mask = MaskGrid::zeros(h, w);
    let mut stroke_widths = Vec::with_capacity(k);
    for i in 0..k {
        let width = params.stroke_width_range.sample(&mut rng) * side;
        stroke_widths.push(width);
        paint_segment(&mut mask, vertices[i], vertices[(i + 1) % k], width);
    }
    fill_polygon(&mut mask, &vertices);

    let trace = MatchingTrace {
        survivors: points.len(),
        match_box: (bx0, by0, bx1, by1),
        crop_box,
        crop_fraction,
        vertices,
        stroke_widths,
    };
    Ok((mask, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OutpaintLayout {
    Both,
    Left,
    Right,
}

/// Outpainting mask with the layout chosen by `seed` (both sides half of the time).
pub fn gen_outpaint_mask(h: usize, w: usize, mask_fraction: f64, seed: Seed) -> Result<MaskGrid> {
    let mut rng = seeded_rng(seed, "outpaint-layout");
    let layout = match rng.random_range(0..4u8) {
        0 | 1 => OutpaintLayout::Both,
        2 => OutpaintLayout::Left,
        _ => OutpaintLayout::Right,
    };
    gen_outpaint_mask_with_layout(h, w, mask_fraction, layout)
}

/// Masks `round(mask_fraction * w)` full-height border columns.
pub fn gen_outpaint_mask_with_layout(h: usize, w: usize, mask_fraction: f64, layout: OutpaintLayout) -> Result<MaskGrid> {
    if !(0.0..1.0).contains(&mask_fraction) {
        return Err(Error::invalid(format!("outpaint fraction {mask_fraction} outside [0, 1)")));
    }
    let cols = libm::round(mask_fraction * w as f64) as usize;
    if cols == 0 {
        return Err(Error::EmptyMask(format!("outpaint fraction {mask_fraction} masks no column")));
    }
    let (left, right) = match layout {
        OutpaintLayout::Both => (cols / 2, cols - cols / 2),
        OutpaintLayout::Left => (cols, 0),
        OutpaintLayout::Right => (0, cols),
    };
    Ok(MaskGrid::from_fn(h, w, |_, x| x < left || x >= w - right))
}

/// Morphological dilation with a `kernel`×`kernel` square (separable max filter).
pub fn dilate_mask(mask: &MaskGrid, kernel: usize) -> Result<MaskGrid> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::invalid(format!("dilation kernel {kernel} must be odd and >= 1")));
    }
    let r = kernel / 2;
    let (h, w) = (mask.height(), mask.width());
    let rows = MaskGrid::from_fn(h, w, |y, x| {
        (x.saturating_sub(r)..=(x + r).min(w - 1)).any(|xx| mask.get(y, xx))
    });
    Ok(MaskGrid::from_fn(h, w, |y, x| {
        (y.saturating_sub(r)..=(y + r).min(h - 1)).any(|yy| rows.get(yy, x))
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NvsTrace {
    pub kernel: usize,
    pub box_enlarge: f64,
    /// Enlarged object box, `(x0, y0, x1, y1)`.
    pub enlarged_box: (f64, f64, f64, f64),
    pub points: Vec<(f64, f64)>,
}

pub fn gen_nvs_mask(object_mask: &MaskGrid, seed: Seed, params: &NvsMaskParams) -> Result<MaskGrid> {
    gen_nvs_mask_traced(object_mask, seed, params).map(|(m, _)| m)
}

/// Dilated object mask united with an irregular stroke painted through
/// points sampled in the enlarged object box.
pub fn gen_nvs_mask_traced(object_mask: &MaskGrid, seed: Seed, params: &NvsMaskParams) -> Result<(MaskGrid, NvsTrace)> {
    let Some((y0, x0, y1, x1)) = object_mask.bounding_box() else {
        return Err(Error::EmptyMask("object mask is empty".into()));
    };
    let odd_kernels: Vec<usize> =
        (params.kernel_range.lo..=params.kernel_range.hi).filter(|k| k % 2 == 1).collect();
    if odd_kernels.is_empty() {
        return Err(Error::invalid("kernel range holds no odd size"));
    }
    let mut rng = seeded_rng(seed, "nvs-mask");
    let kernel = odd_kernels[rng.random_range(0..odd_kernels.len())];
    let dilated = dilate_mask(object_mask, kernel)?;

    let (h, w) = (object_mask.height() as f64, object_mask.width() as f64);
    let enlarge = params.box_enlarge_range.sample(&mut rng);
    let (bw, bh) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
    let (hw, hh) = (bw * (1.0 + enlarge) / 2.0, bh * (1.0 + enlarge) / 2.0);
    let ebox = ((cx - hw).max(0.0), (cy - hh).max(0.0), (cx + hw).min(w), (cy + hh).min(h));

    let n = params.point_count_range.sample(&mut rng);
    let points: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let x = if ebox.2 > ebox.0 { rng.random_range(ebox.0..ebox.2) } else { ebox.0 };
            let y = if ebox.3 > ebox.1 { rng.random_range(ebox.1..ebox.3) } else { ebox.1 };
            (x, y)
        })
        .collect();
    let side = h.min(w);
    let mut painted = MaskGrid::zeros(object_mask.height(), object_mask.width());
    for pair in points.windows(2) {
        let width = params.stroke_width_range.sample(&mut rng) * side;
        paint_segment(&mut painted, pair[0], pair[1], width);
    }
    let out = painted.union(&dilated)?;
    Ok((out, NvsTrace { kernel, box_enlarge: enlarge, enlarged_box: ebox, points }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::vec;

    fn synthetic_matches(n: usize, seed: u64, side: f64) -> MatchSet {
        let mut rng = seeded_rng(Seed(seed), "fixture");
        MatchSet::new(
            (0..n)
                .map(|_| {
                    let p = (rng.random_range(0.0..side), rng.random_range(0.0..side));
                    Match { ref_point: p, tar_point: p, confidence: 0.9 }
                })
                .collect(),
        )
    }

    #[test]
    fn irregular_mask_fraction_and_determinism() {
        let p = IrregularParams::default();
        let a = gen_irregular_mask(256, 256, Seed(1), &p).unwrap();
        let b = gen_irregular_mask(256, 256, Seed(1), &p).unwrap();
        assert_eq!(a, b);
        assert!((0.05..=0.6).contains(&a.fraction()), "{}", a.fraction());
        assert!(gen_irregular_mask(8, 32, Seed(1), &p).is_err());
    }

    #[test]
    fn irregular_mask_reports_impossible_constraint() {
        let p = IrregularParams { fraction_range: Interval::new(0.99, 1.0), max_attempts: 5, ..Default::default() };
        match gen_irregular_mask(32, 32, Seed(4), &p) {
            Err(Error::MaskConstraint { constraint, attempts }) => {
                assert!(constraint.contains("fraction"));
                assert_eq!(attempts, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matching_mask_stays_near_crop_box() {
        let matches = synthetic_matches(50, 3, 100.0);
        let params = MaskParams::default();
        let (mask, trace) = gen_matching_mask_traced(&matches, 100, 100, Seed(3), &params).unwrap();
        assert!(params.vertex_count_range.contains(trace.vertices.len()));
        assert!(params.crop_fraction_range.contains(trace.crop_fraction));
        let r = trace.stroke_widths.iter().fold(0.5f64, |m, w| m.max(w / 2.0)) + 1.0;
        let (x0, y0, x1, y1) = trace.crop_box;
        for y in 0..100 {
            for x in 0..100 {
                if mask.get(y, x) {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    assert!(px >= x0 - r && px <= x1 + r && py >= y0 - r && py <= y1 + r);
                }
            }
        }
    }

    #[test]
    fn matching_mask_rejects_unconfident_sets() {
        let mut matches = synthetic_matches(20, 5, 64.0);
        for m in &mut matches.matches {
            m.confidence = 0.0;
        }
        let err = gen_matching_mask(&matches, 64, 64, Seed(1), &MaskParams::default()).unwrap_err();
        assert!(matches!(err, Error::NotEnoughMatches { found: 0, .. }));
        assert!(err.to_string().contains("irregular"));
    }

    #[test]
    fn outpaint_mask_column_count() {
        let m = gen_outpaint_mask(128, 128, 0.5, Seed(9)).unwrap();
        let cols = (0..128).filter(|&x| m.get(0, x)).count();
        assert_eq!(cols, 64);
        for x in 0..128 {
            let col: usize = (0..128).filter(|&y| m.get(y, x)).count();
            assert!(col == 0 || col == 128);
        }
        assert!(matches!(gen_outpaint_mask(32, 32, 0.001, Seed(0)), Err(Error::EmptyMask(_))));
        assert!(gen_outpaint_mask(32, 32, 1.0, Seed(0)).is_err());
        assert!(gen_outpaint_mask(32, 32, -0.2, Seed(0)).is_err());
    }

    #[test]
    fn outpaint_both_sides_is_symmetric() {
        let m = gen_outpaint_mask_with_layout(16, 32, 0.5, OutpaintLayout::Both).unwrap();
        for x in 0..32 {
            assert_eq!(m.get(0, x), x < 8 || x >= 24);
        }
    }

    #[test]
    fn nvs_mask_covers_object() {
        let object = MaskGrid::from_fn(128, 128, |y, x| (44..84).contains(&y) && (44..84).contains(&x));
        let params = NvsMaskParams::default();
        let (mask, trace) = gen_nvs_mask_traced(&object, Seed(2), &params).unwrap();
        assert!(mask.is_superset_of(&object));
        assert!(params.point_count_range.contains(trace.points.len()));
        assert!(trace.kernel % 2 == 1 && params.kernel_range.contains(trace.kernel));
        let full = MaskGrid::ones(32, 32);
        assert_eq!(gen_nvs_mask(&full, Seed(5), &params).unwrap(), full);
        assert!(gen_nvs_mask(&MaskGrid::zeros(32, 32), Seed(5), &params).is_err());
    }

    #[test]
    fn nvs_params_scale_with_resolution() {
        let p = NvsMaskParams::for_side(32);
        assert!(p.kernel_range.lo >= 1);
        assert!((p.kernel_range.lo..=p.kernel_range.hi).any(|k| k % 2 == 1));
        assert_eq!(p.point_count_range, Interval::new(20, 45));
    }

    #[test]
    fn dilation_basics() {
        let mut m = MaskGrid::zeros(9, 9);
        m.set(4, 4, true);
        let d = dilate_mask(&m, 3).unwrap();
        assert_eq!(d.count(), 9);
        assert_eq!(d.bounding_box(), Some((3, 3, 6, 6)));
        assert_eq!(dilate_mask(&m, 1).unwrap(), m);
        assert!(dilate_mask(&m, 4).is_err());
        assert!(dilate_mask(&m, 0).is_err());
    }

    #[test]
    fn polygon_fill_square() {
        let mut m = MaskGrid::zeros(10, 10);
        fill_polygon(&mut m, &vec![(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0)]);
        assert_eq!(m.count(), 16);
        assert_eq!(m.bounding_box(), Some((2, 2, 6, 6)));
    }
}
