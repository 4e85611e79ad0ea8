//! Reconstruction metrics, metric plug-ins, and reference-attention maps.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::canvas::{ImageCanvas, MaskGrid};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

fn check_pair(a: &ImageCanvas, b: &ImageCanvas) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over `region` (all pixels if absent); `+∞` for identical inputs.
pub fn psnr(a: &ImageCanvas, b: &ImageCanvas, region: Option<&MaskGrid>) -> Result<f64> {
    check_pair(a, b)?;
    let plane = a.height() * a.width();
    if let Some(m) = region {
        if m.height() != a.height() || m.width() != a.width() {
            return Err(Error::shape("region mask does not match the images"));
        }
        if m.is_empty() {
            return Err(Error::EmptyMask("psnr region".into()));
        }
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if region.is_some_and(|m| m.data()[i % plane] == 0) {
            continue;
        }
        sum += (x - y) * (x - y);
        n += 1;
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(1.0 / mse))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode Gaussian filter of one plane.
fn blur(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = Vec::with_capacity(h * ow);
    for y in 0..h {
        for x in 0..ow {
            rows.push((0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum::<f64>());
        }
    }
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            out.push((0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum::<f64>());
        }
    }
    out
}

/// Gaussian-windowed SSIM (window 11, σ 1.5, K1 0.01, K2 0.03, L 1), mean
/// over valid windows and channels.
pub fn ssim(a: &ImageCanvas, b: &ImageCanvas) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("ssim needs sides >= {SSIM_WINDOW}, got {h}x{w}")));
    }
    let g = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        let x = &a.data()[c * plane..(c + 1) * plane];
        let y = &b.data()[c * plane..(c + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(x, h, w, &g), blur(y, h, w, &g));
        let (sxx, syy, sxy) = (blur(&xx, h, w, &g), blur(&yy, h, w, &g), blur(&xy, h, w, &g));
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// How masked query scores are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttentionMean {
    /// Mask-weighted sum divided by the number of all queries.
    #[default]
    Literal,
    /// Mask-weighted sum divided by the number of masked queries.
    Normalized,
}

/// Query/key projections of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbe {
    pub layer: String,
    /// `c × d`
    pub wq: Matrix,
    /// `c × d`
    pub wk: Matrix,
}

/// Attention that the masked queries pay to each reference-pane position.
///
/// `x` holds one feature row per position of the `h × 2w` stitched grid in
/// row-major order; `mask` is brought to that grid by nearest sampling. The
/// result is the `h × w` left half of the averaged pre-softmax scores `q·kᵀ`.
pub fn attention_score_map(
    x: &Matrix,
    grid_h: usize,
    grid_w: usize,
    mask: &MaskGrid,
    probe: &AttentionProbe,
    mean: AttentionMean,
) -> Result<Matrix> {
    let n = grid_h * grid_w;
    if x.rows() != n || grid_w % 2 != 0 {
        return Err(Error::shape(format!("{} feature rows for a {grid_h}x{grid_w} grid", x.rows())));
    }
    let m = mask.resize_nearest(grid_h, grid_w);
    if m.is_empty() {
        return Err(Error::EmptyMask("attention probe mask".into()));
    }
    let q = x.matmul(&probe.wq)?;
    let k = x.matmul(&probe.wk)?;
    if q.cols() != k.cols() {
        return Err(Error::shape("query and key widths differ"));
    }
    let d = q.cols();
    let mut pooled = alloc::vec![0.0; d];
    for (row, &on) in m.data().iter().enumerate() {
        if on == 1 {
            for (p, v) in pooled.iter_mut().zip(q.row(row)) {
                *p += v;
            }
        }
    }
    let denom = match mean {
        AttentionMean::Literal => n as f64,
        AttentionMean::Normalized => m.count() as f64,
    };
    let half = grid_w / 2;
    Ok(Matrix::from_fn(grid_h, half, |y, xx| {
        let key = k.row(y * grid_w + xx);
        pooled.iter().zip(key).map(|(p, k)| p * k).sum::<f64>() / denom
    }))
}

/// An externally backed metric such as a perceptual distance.
pub trait MetricPlugin {
    fn name(&self) -> &str;
    fn compute(&self, a: &ImageCanvas, b: &ImageCanvas) -> core::result::Result<f64, String>;
}

#[derive(Default)]
pub struct PluginRegistry {
    plugins: Vec<Box<dyn MetricPlugin>>,
}

impl PluginRegistry {
    pub fn register(&mut self, plugin: Box<dyn MetricPlugin>) {
        self.plugins.retain(|p| p.name() != plugin.name());
        self.plugins.push(plugin);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.plugins.iter().map(|p| p.name())
    }

    pub fn is_empty(&self) -> bool {
        self.plugins.is_empty()
    }
}

/// Runs the named plug-in; `None` when it is not registered.
pub fn plugin_metric(registry: &PluginRegistry, name: &str, a: &ImageCanvas, b: &ImageCanvas) -> Result<Option<f64>> {
    let Some(p) = registry.plugins.iter().find(|p| p.name() == name) else {
        return Ok(None);
    };
    p.compute(a, b)
        .map(Some)
        .map_err(|message| Error::Plugin { name: name.to_string(), message })
}

#[cfg(feature = "serde")]
mod inf_string {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr<'a> {
        Num(f64),
        Str(&'a str),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str("inf") => Ok(f64::INFINITY),
            Repr::Str(other) => Err(serde::de::Error::custom(alloc::format!("unexpected metric value `{other}`"))),
        }
    }
}

/// Averaged metrics over a set of samples. Plug-in metrics appear only when computed.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MetricReport {
    /// Mean masked-region PSNR in dB; `+∞` (serialized as `"inf"`) when every sample is exact.
    #[cfg_attr(feature = "serde", serde(with = "inf_string"))]
    pub psnr: f64,
    pub ssim: f64,
    pub samples: usize,
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub plugins: BTreeMap<String, f64>,
}

/// One evaluated pair: output, ground truth, and the region that was generated.
pub struct EvalSample<'a> {
    pub output: &'a ImageCanvas,
    pub target: &'a ImageCanvas,
    pub region: Option<&'a MaskGrid>,
}

impl MetricReport {
    pub fn compute(samples: &[EvalSample<'_>], registry: &PluginRegistry) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no samples to evaluate"));
        }
        let (mut p, mut s) = (0.0, 0.0);
        let mut plugins = BTreeMap::new();
        for e in samples {
            p += psnr(e.output, e.target, e.region)?;
            s += ssim(e.output, e.target)?;
            for name in registry.names() {
                if let Some(v) = plugin_metric(registry, name, e.output, e.target)? {
                    *plugins.entry(name.to_string()).or_insert(0.0) += v;
                }
            }
        }
        let n = samples.len() as f64;
        plugins.values_mut().for_each(|v| *v /= n);
        Ok(Self { psnr: p / n, ssim: s / n, samples: samples.len(), plugins })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::Seed;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn random(seed: u64, h: usize, w: usize, c: usize) -> ImageCanvas {
        let mut rng = seeded_rng(Seed(seed), "img");
        ImageCanvas::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..=1.0)).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random(1, 12, 12, 3);
        assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
        let z = ImageCanvas::filled(12, 12, 1, 0.0).unwrap();
        let h = ImageCanvas::filled(12, 12, 1, 0.5).unwrap();
        assert!((psnr(&z, &h, None).unwrap() - 10.0 * libm::log10(4.0)).abs() < 1e-12);
        assert!(psnr(&z, &h, Some(&MaskGrid::zeros(12, 12))).is_err());
    }

    #[test]
    fn psnr_matches_naive_loop() {
        for seed in 0..10 {
            let (a, b) = (random(seed, 9, 13, 3), random(seed + 100, 9, 13, 3));
            let m = MaskGrid::from_fn(9, 13, |y, x| (x + 2 * y) % 3 == 0);
            let (mut s, mut n) = (0.0, 0);
            for c in 0..3 {
                for y in 0..9 {
                    for x in 0..13 {
                        if m.get(y, x) {
                            let d = a.get(c, y, x) - b.get(c, y, x);
                            s += d * d;
                            n += 1;
                        }
                    }
                }
            }
            let naive = 10.0 * libm::log10(n as f64 / s);
            assert!((psnr(&a, &b, Some(&m)).unwrap() - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_properties() {
        let a = random(3, 16, 20, 3);
        let b = random(4, 16, 20, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let mut rng = seeded_rng(Seed(5), "bin");
        let bin = ImageCanvas::from_fn(24, 24, 1, |_, _, _| f64::from(u8::from(rng.random_bool(0.5)))).unwrap();
        let inv = ImageCanvas::from_fn(24, 24, 1, |c, y, x| 1.0 - bin.get(c, y, x)).unwrap();
        assert!(ssim(&bin, &inv).unwrap() < 0.1);
        assert!(ssim(&random(1, 10, 20, 1), &random(2, 10, 20, 1)).is_err());
    }

    fn oracle_map(x: &Matrix, gh: usize, gw: usize, m: &MaskGrid, p: &AttentionProbe, norm: bool) -> Matrix {
        let n = gh * gw;
        let q = x.matmul(&p.wq).unwrap();
        let k = x.matmul(&p.wk).unwrap();
        let mut scores = alloc::vec![0.0; n];
        for key in 0..n {
            for query in 0..n {
                let mut dot = 0.0;
                for j in 0..q.cols() {
                    dot += q.get(query, j) * k.get(key, j);
                }
                scores[key] += dot * f64::from(m.data()[query]);
            }
        }
        let denom = if norm { m.count() as f64 } else { n as f64 };
        Matrix::from_fn(gh, gw / 2, |y, xx| scores[y * gw + xx] / denom)
    }

    fn rand_matrix(rng: &mut crate::StreamRng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn attention_map_matches_oracle() {
        let mut rng = seeded_rng(Seed(9), "attn");
        for _ in 0..5 {
            let x = rand_matrix(&mut rng, 4 * 8, 5);
            let probe = AttentionProbe { layer: "p".into(), wq: rand_matrix(&mut rng, 5, 3), wk: rand_matrix(&mut rng, 5, 3) };
            let m = MaskGrid::from_fn(4, 8, |y, x| x >= 4 && (x + y) % 2 == 0);
            for (mode, norm) in [(AttentionMean::Literal, false), (AttentionMean::Normalized, true)] {
                let got = attention_score_map(&x, 4, 8, &m, &probe, mode).unwrap();
                assert_eq!((got.rows(), got.cols()), (4, 4));
                let want = oracle_map(&x, 4, 8, &m, &probe, norm);
                assert!(got.add(&want.scale(-1.0)).unwrap().max_abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_query_identity_projection() {
        let mut rng = seeded_rng(Seed(10), "attn");
        let x = rand_matrix(&mut rng, 2 * 4, 3);
        let probe = AttentionProbe { layer: "id".into(), wq: Matrix::identity(3), wk: Matrix::identity(3) };
        let m = MaskGrid::from_fn(2, 4, |y, x| y == 1 && x == 3);
        let got = attention_score_map(&x, 2, 4, &m, &probe, AttentionMean::Normalized).unwrap();
        for y in 0..2 {
            for xx in 0..2 {
                let dot: f64 = x.row(7).iter().zip(x.row(y * 4 + xx)).map(|(a, b)| a * b).sum();
                assert!((got.get(y, xx) - dot).abs() < 1e-12);
            }
        }
        assert!(attention_score_map(&x, 2, 4, &MaskGrid::zeros(2, 4), &probe, AttentionMean::Literal).is_err());
    }

    struct Const(f64);
    impl MetricPlugin for Const {
        fn name(&self) -> &str {
            "clip_score"
        }
        fn compute(&self, _: &ImageCanvas, _: &ImageCanvas) -> core::result::Result<f64, String> {
            Ok(self.0)
        }
    }

    struct Broken;
    impl MetricPlugin for Broken {
        fn name(&self) -> &str {
            "lpips"
        }
        fn compute(&self, _: &ImageCanvas, _: &ImageCanvas) -> core::result::Result<f64, String> {
            Err("weights not found".into())
        }
    }

    #[test]
    fn plugin_contracts() {
        let a = random(1, 12, 12, 3);
        let mut reg = PluginRegistry::default();
        let sample = [EvalSample { output: &a, target: &a, region: None }];
        let r = MetricReport::compute(&sample, &reg).unwrap();
        assert!(r.plugins.is_empty());
        assert_eq!(r.psnr, f64::INFINITY);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        reg.register(Box::new(Const(0.5)));
        assert_eq!(MetricReport::compute(&sample, &reg).unwrap().plugins["clip_score"], 0.5);
        reg.register(Box::new(Broken));
        let err = MetricReport::compute(&sample, &reg).unwrap_err();
        assert!(alloc::format!("{err}").contains("weights not found"));
    }
}
