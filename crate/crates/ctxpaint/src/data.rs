//! Pair manifests, co-occurrence filtering, per-task sample drawing and the
//! procedural toy dataset.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ctxpaint_core::canvas::{pane_concat, pane_split};
use ctxpaint_core::diffusion::{Autoencoder, InpaintContext};
use ctxpaint_core::masks::{
    gen_irregular_mask, gen_matching_mask, gen_nvs_mask_traced, gen_outpaint_mask, IrregularParams,
    MaskParams, Match, MatchSet, NvsMaskParams,
};
use ctxpaint_core::pose::{RelativePose, SphericalPose};
use ctxpaint_core::rng::{derive_seed, seeded_rng};
use ctxpaint_core::stitch::{
    compose_local_sr, compose_nvs, compose_plain, compose_ref_inpaint, FrameStyle, MaskFill,
    PatchBox, StitchedCanvas,
};
use ctxpaint_core::{ImageCanvas, MaskGrid, Seed, TaskKind};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_image, read_mask, write_image, write_mask};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TOY_VERSION: &str = "ctxpaint-toy 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Absolute spherical poses of the two views of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosePair {
    #[serde(rename = "ref")]
    pub reference: SphericalPose,
    #[serde(rename = "tar")]
    pub target: SphericalPose,
}

impl PosePair {
    pub fn relative(&self) -> Result<RelativePose> {
        Ok(RelativePose::between(&self.reference, &self.target)?)
    }
}

/// One rendered view of a scene's object, for view synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub path: PathBuf,
    pub object_mask_path: PathBuf,
    pub pose: SphericalPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub ref_path: PathBuf,
    pub tar_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cooccurrence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PosePair>,
    /// Object mask of the reference image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tar_object_mask_path: Option<PathBuf>,
    pub split: Split,
    /// Object-only renders; the first one shares the reference pose.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub views: Vec<ViewRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<ToyScene>,
}

/// Records plus the directory their relative paths resolve against.
#[derive(Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<PairRecord>,
    images: Mutex<HashMap<PathBuf, ImageCanvas>>,
}

impl Clone for Manifest {
    fn clone(&self) -> Self {
        Self::new(self.root.clone(), self.records.clone())
    }
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<PairRecord>) -> Self {
        Self {
            root: root.into(),
            records,
            images: Mutex::new(HashMap::new()),
        }
    }

    /// Parses JSON lines in file order; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Manifest {
                path: path.into(),
                line: i + 1,
                message,
            };
            let rec: PairRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if let Some(c) = rec.cooccurrence {
                if !(0.0..=1.0).contains(&c) {
                    return Err(bad(format!("cooccurrence {c} outside [0, 1]")));
                }
            }
            for p in [&rec.ref_path, &rec.tar_path] {
                if !root.join(p).is_file() {
                    return Err(bad(format!("{} does not exist", root.join(p).display())));
                }
            }
            records.push(rec);
        }
        Ok(Self::new(root, records))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("records serialise");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(Error::io(path))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn image(&self, p: &Path) -> Result<ImageCanvas> {
        let full = self.resolve(p);
        if let Some(img) = self.images.lock().expect("image cache poisoned").get(&full) {
            return Ok(img.clone());
        }
        let img = read_image(&full)?;
        self.images
            .lock()
            .expect("image cache poisoned")
            .insert(full, img.clone());
        Ok(img)
    }

    pub fn mask(&self, p: &Path) -> Result<MaskGrid> {
        read_mask(&self.resolve(p))
    }

    pub fn matches(&self, p: &Path) -> Result<MatchSet> {
        read_matches(&self.resolve(p))
    }

    pub fn split(&self, split: Split) -> Manifest {
        Manifest::new(
            self.root.clone(),
            self.records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct MatchJson {
    #[serde(rename = "ref")]
    ref_point: [f64; 2],
    #[serde(rename = "tar")]
    tar_point: [f64; 2],
    conf: f64,
}

pub fn read_matches(path: &Path) -> Result<MatchSet> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let list: Vec<MatchJson> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(MatchSet::new(
        list.into_iter()
            .map(|m| Match {
                ref_point: (m.ref_point[0], m.ref_point[1]),
                tar_point: (m.tar_point[0], m.tar_point[1]),
                confidence: m.conf,
            })
            .collect(),
    ))
}

pub fn write_matches(path: &Path, set: &MatchSet) -> Result<()> {
    let list: Vec<MatchJson> = set
        .matches
        .iter()
        .map(|m| MatchJson {
            ref_point: [m.ref_point.0, m.ref_point.1],
            tar_point: [m.tar_point.0, m.tar_point.1],
            conf: m.confidence,
        })
        .collect();
    fs::write(path, serde_json::to_vec(&list).expect("matches serialise")).map_err(Error::io(path))
}

/// Counts from one filtering pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FilterStats {
    pub kept: usize,
    pub out_of_range: usize,
    pub missing: usize,
}

/// Keeps records whose co-occurrence lies in `[low, high]`; records without a score are skipped with a warning.
pub fn filter_cooccurrence(
    records: &[PairRecord],
    low: f64,
    high: f64,
) -> (Vec<PairRecord>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut kept = Vec::new();
    for r in records {
        match r.cooccurrence {
            None => {
                log::warn!("record {} has no co-occurrence score; skipped", r.id);
                stats.missing += 1;
            }
            Some(c) if (low..=high).contains(&c) => {
                kept.push(r.clone());
                stats.kept += 1;
            }
            Some(_) => stats.out_of_range += 1,
        }
    }
    log::info!(
        "co-occurrence filter [{low}, {high}]: kept {}, out of range {}, missing {}",
        stats.kept,
        stats.out_of_range,
        stats.missing
    );
    (kept, stats)
}

/// Validation membership as a pure function of record id and seed.
pub fn assign_split(id: &str, seed: Seed, val_fraction: f64) -> Split {
    let u = (derive_seed(seed, &format!("split:{id}"), 0).0 >> 11) as f64 / (1u64 << 53) as f64;
    if u < val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Irregular,
    Matching,
    Outpaint,
    Nvs,
    /// Whole target pane, as in super-resolution.
    Full,
}

/// Mixture over mask generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    pub weights: Vec<(MaskKind, f64)>,
}

impl MaskPolicy {
    pub fn for_task(task: TaskKind) -> Self {
        let weights = match task {
            TaskKind::Inpaint => vec![(MaskKind::Irregular, 1.0)],
            TaskKind::Outpaint => vec![(MaskKind::Outpaint, 1.0)],
            TaskKind::RefInpaint => vec![(MaskKind::Irregular, 0.75), (MaskKind::Matching, 0.25)],
            TaskKind::LocalSr => vec![(MaskKind::Full, 1.0)],
            TaskKind::Nvs => vec![(MaskKind::Nvs, 1.0)],
        };
        Self { weights }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().map(|(_, w)| w).sum();
        if self.weights.is_empty()
            || self.weights.iter().any(|(_, w)| !(*w >= 0.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "mask policy weights {:?} must be non-negative and sum to 1",
                self.weights
            )));
        }
        Ok(())
    }

    pub fn choose(&self, u: f64) -> MaskKind {
        let mut acc = 0.0;
        for &(kind, w) in &self.weights {
            acc += w;
            if u < acc {
                return kind;
            }
        }
        self.weights.last().expect("validated policy").0
    }
}

/// Generator parameters used while drawing samples, scaled to the pane side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrawOptions {
    pub matching: MaskParams,
    pub irregular: IrregularParams,
    pub nvs: NvsMaskParams,
    pub frame: FrameStyle,
    pub nvs_background: [f64; 3],
    pub nvs_fill: MaskFill,
    /// Local-SR patch side range in source pixels.
    pub patch_side: (usize, usize),
    /// Outpainting training fractions.
    pub outpaint_fraction: (f64, f64),
    pub max_retries: usize,
}

impl Default for DrawOptions {
    fn default() -> Self {
        Self::for_side(256)
    }
}

impl DrawOptions {
    pub fn for_side(side: usize) -> Self {
        let scale = |v: f64| ((v * side as f64 / 256.0).round() as usize).max(2);
        Self {
            matching: MaskParams::default(),
            irregular: IrregularParams::default(),
            nvs: NvsMaskParams::for_side(side),
            frame: FrameStyle::for_side(side),
            nvs_background: [1.0; 3],
            nvs_fill: MaskFill::Zero,
            patch_side: (scale(48.0), scale(72.0)),
            outpaint_fraction: (0.25, 0.75),
            max_retries: 16,
        }
    }
}

/// A composed training input with its ground-truth canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawnSample {
    pub stitched: StitchedCanvas,
    /// Unmasked canvas the model should reproduce.
    pub target: ImageCanvas,
    pub record: usize,
    pub mask_kind: MaskKind,
    /// Matching was chosen but too few confident matches forced an irregular mask.
    pub fallback: bool,
    pub patch_side: Option<usize>,
    pub nvs_points: Option<usize>,
}

impl DrawnSample {
    /// Denoiser context whose clean latent is the ground truth.
    pub fn context(&self, ae: &dyn Autoencoder) -> Result<InpaintContext> {
        let mut ctx = InpaintContext::new(&self.stitched, ae)?;
        ctx.z0 = ae.encode(&self.target)?;
        Ok(ctx)
    }
}

enum Skip {
    Missing(&'static str),
    Failed(Error),
}

impl From<Error> for Skip {
    fn from(e: Error) -> Self {
        Skip::Failed(e)
    }
}

impl From<ctxpaint_core::Error> for Skip {
    fn from(e: ctxpaint_core::Error) -> Self {
        Skip::Failed(e.into())
    }
}

/// Picks a record, draws a mask from `policy`, and composes the task input.
///
/// Records that lack a field the task needs are skipped and another is drawn,
/// up to `opts.max_retries` times.
pub fn draw_training_sample(
    manifest: &Manifest,
    task: TaskKind,
    policy: &MaskPolicy,
    opts: &DrawOptions,
    seed: Seed,
) -> Result<DrawnSample> {
    policy.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::Config("cannot draw from an empty manifest".into()));
    }
    let mut rng = seeded_rng(seed, "draw-sample");
    for attempt in 0..opts.max_retries.max(1) {
        let index = rng.random_range(0..manifest.records.len());
        let kind = policy.choose(rng.random::<f64>());
        let sub = derive_seed(seed, "draw-attempt", attempt as u64);
        match draw_from_record(manifest, index, task, kind, opts, sub) {
            Ok(s) => return Ok(s),
            Err(Skip::Missing(field)) => {
                log::warn!(
                    "record {} lacks {field} for {task}; drawing another",
                    manifest.records[index].id
                )
            }
            Err(Skip::Failed(e)) => return Err(e),
        }
    }
    Err(Error::Config(format!(
        "no usable record for {task} after {} draws",
        opts.max_retries.max(1)
    )))
}

fn draw_from_record(
    manifest: &Manifest,
    index: usize,
    task: TaskKind,
    kind: MaskKind,
    opts: &DrawOptions,
    seed: Seed,
) -> std::result::Result<DrawnSample, Skip> {
    let rec = &manifest.records[index];
    let mut rng = seeded_rng(seed, "draw-record");
    let mask_seed = derive_seed(seed, "mask", 0);
    let (mut fallback, mut patch_side, mut nvs_points) = (false, None, None);
    let (stitched, target) = match task {
        TaskKind::Inpaint | TaskKind::Outpaint => {
            let image = manifest.image(if rng.random::<bool>() {
                &rec.ref_path
            } else {
                &rec.tar_path
            })?;
            let (h, w) = (image.height(), image.width());
            let mask = match kind {
                MaskKind::Outpaint => {
                    let f = rng.random_range(opts.outpaint_fraction.0..=opts.outpaint_fraction.1);
                    gen_outpaint_mask(h, w, f, mask_seed)?
                }
                _ => gen_irregular_mask(h, w, mask_seed, &opts.irregular)?,
            };
            (compose_plain(&image, &mask, task)?, image)
        }
        TaskKind::RefInpaint => {
            let reference = manifest.image(&rec.ref_path)?;
            let target = manifest.image(&rec.tar_path)?;
            let (h, w) = (target.height(), target.width());
            let mask = if kind == MaskKind::Matching {
                let path = rec.match_path.as_ref().ok_or(Skip::Missing("match_path"))?;
                match gen_matching_mask(&manifest.matches(path)?, h, w, mask_seed, &opts.matching) {
                    Ok(m) => m,
                    Err(ctxpaint_core::Error::NotEnoughMatches { found, .. }) => {
                        log::debug!(
                            "record {}: {found} confident matches; irregular fallback",
                            rec.id
                        );
                        fallback = true;
                        gen_irregular_mask(h, w, mask_seed, &opts.irregular)?
                    }
                    Err(e) => return Err(e.into()),
                }
            } else {
                gen_irregular_mask(h, w, mask_seed, &opts.irregular)?
            };
            (
                compose_ref_inpaint(&reference, &target, &mask)?,
                pane_concat(&reference, &target)?,
            )
        }
        TaskKind::LocalSr => {
            let scene = rec.scene.as_ref().ok_or(Skip::Missing("scene"))?;
            let pose = rec.pose.as_ref().ok_or(Skip::Missing("pose"))?;
            let reference = manifest.image(&rec.ref_path)?;
            let side = reference.width().min(reference.height());
            let lo = opts.patch_side.0.max(2 * opts.frame.width + 1);
            let hi = opts.patch_side.1.min(side).max(lo);
            let s = rng.random_range(lo..=hi);
            let patch = PatchBox {
                x: rng.random_range(0..=reference.width() - s),
                y: rng.random_range(0..=reference.height() - s),
                w: s,
                h: s,
            };
            let stitched = compose_local_sr(&reference, &patch, &opts.frame)?;
            let (framed, _) = pane_split(&stitched.canvas)?;
            let view = ViewTransform::new(&pose.reference, scene.side);
            let hr = scene.render_region(
                &view,
                &patch,
                reference.height(),
                reference.width(),
                false,
                reference.channels(),
            )?;
            patch_side = Some(s);
            (stitched, pane_concat(&framed, &hr)?)
        }
        TaskKind::Nvs => {
            let pose = rec.pose.as_ref().ok_or(Skip::Missing("pose"))?;
            let (reference, ref_pose, target, tar_mask, tar_pose) = if rec.views.len() >= 2 {
                let k = rng.random_range(1..rec.views.len());
                let (v0, vk) = (&rec.views[0], &rec.views[k]);
                (
                    manifest.image(&v0.path)?,
                    v0.pose,
                    manifest.image(&vk.path)?,
                    manifest.mask(&vk.object_mask_path)?,
                    vk.pose,
                )
            } else {
                let m = rec
                    .tar_object_mask_path
                    .as_ref()
                    .ok_or(Skip::Missing("views or tar_object_mask_path"))?;
                (
                    manifest.image(&rec.ref_path)?,
                    pose.reference,
                    manifest.image(&rec.tar_path)?,
                    manifest.mask(m)?,
                    pose.target,
                )
            };
            if tar_mask.is_empty() {
                return Err(Skip::Missing("a visible target object"));
            }
            let (mask, trace) = gen_nvs_mask_traced(&tar_mask, mask_seed, &opts.nvs)?;
            let rel = RelativePose::between(&ref_pose, &tar_pose)?;
            let bg = &opts.nvs_background[..reference.channels()];
            nvs_points = Some(trace.points.len());
            (
                compose_nvs(&reference, &mask, rel, bg, opts.nvs_fill, mask_seed)?,
                pane_concat(&reference, &target)?,
            )
        }
    };
    Ok(DrawnSample {
        stitched,
        target,
        record: index,
        mask_kind: kind,
        fallback,
        patch_side,
        nvs_points,
    })
}

// --- toy scenes ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Triangle,
}

/// A filled shape in world coordinates (reference-pane pixels at the canonical pose).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: [f64; 2],
    pub half: [f64; 2],
    pub angle: f64,
    pub color: [f64; 3],
}

impl Shape {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let u = (c * dx + s * dy) / self.half[0];
        let v = (-s * dx + c * dy) / self.half[1];
        match self.kind {
            ShapeKind::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Triangle => v <= 1.0 && v >= 2.0 * u.abs() - 1.0,
        }
    }
}

/// Colored shapes on a plain background; the last shape is the object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyScene {
    pub side: usize,
    pub background: [f64; 3],
    pub shapes: Vec<Shape>,
}

/// Similarity transform from world to view pixels determined by a spherical pose.
///
/// The azimuth shifts horizontally and slightly rotates, the polar angle
/// shifts vertically, and the radius zooms about the pane centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    center: f64,
    scale: f64,
    rot: f64,
    shift: [f64; 2],
}

const SHIFT_PER_RADIAN: f64 = 1.0;
const ROTATION_PER_RADIAN: f64 = 0.25;

impl ViewTransform {
    pub fn new(pose: &SphericalPose, side: usize) -> Self {
        let side = side as f64;
        Self {
            center: side / 2.0,
            scale: 1.0 / pose.r,
            rot: ROTATION_PER_RADIAN * pose.phi,
            shift: [
                -SHIFT_PER_RADIAN * side * pose.phi,
                -SHIFT_PER_RADIAN * side * pose.theta,
            ],
        }
    }

    pub fn to_view(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rot.sin_cos();
        let (dx, dy) = (p[0] - self.center, p[1] - self.center);
        [
            self.center + self.scale * (c * dx - s * dy) + self.shift[0],
            self.center + self.scale * (s * dx + c * dy) + self.shift[1],
        ]
    }

    pub fn to_world(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rot.sin_cos();
        let (dx, dy) = (
            (q[0] - self.center - self.shift[0]) / self.scale,
            (q[1] - self.center - self.shift[1]) / self.scale,
        );
        [self.center + c * dx + s * dy, self.center - s * dx + c * dy]
    }
}

fn gray(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

impl ToyScene {
    pub fn random(side: usize, seed: Seed) -> Self {
        let mut rng = seeded_rng(seed, "toy-scene");
        let s = side as f64;
        let background = [0; 3].map(|_| rng.random_range(0.75..0.95));
        let mut shapes = Vec::new();
        let kinds = [ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Triangle];
        let color = |rng: &mut ctxpaint_core::StreamRng| {
            let mut c = [0; 3].map(|_| rng.random_range(0.0..0.7));
            c[rng.random_range(0..3)] = rng.random_range(0.6..1.0);
            c
        };
        for _ in 0..rng.random_range(7..=10) {
            shapes.push(Shape {
                kind: kinds[rng.random_range(0..3)],
                center: [
                    rng.random_range(-0.6 * s..1.6 * s),
                    rng.random_range(-0.6 * s..1.6 * s),
                ],
                half: [
                    rng.random_range(0.08 * s..0.2 * s),
                    rng.random_range(0.08 * s..0.2 * s),
                ],
                angle: rng.random_range(0.0..PI),
                color: color(&mut rng),
            });
        }
        shapes.push(Shape {
            kind: kinds[rng.random_range(0..3)],
            center: [
                rng.random_range(0.4 * s..0.6 * s),
                rng.random_range(0.4 * s..0.6 * s),
            ],
            half: [
                rng.random_range(0.12 * s..0.18 * s),
                rng.random_range(0.12 * s..0.18 * s),
            ],
            angle: rng.random_range(0.0..PI),
            color: color(&mut rng),
        });
        Self {
            side,
            background,
            shapes,
        }
    }

    pub fn object(&self) -> &Shape {
        self.shapes.last().expect("scene has an object")
    }

    /// Topmost shape color at a world point; `object_only` draws the object on `background`.
    pub fn color_at(&self, p: [f64; 2], object_only: Option<[f64; 3]>) -> [f64; 3] {
        match object_only {
            Some(bg) => {
                if self.object().contains(p) {
                    self.object().color
                } else {
                    bg
                }
            }
            None => self
                .shapes
                .iter()
                .rev()
                .find(|s| s.contains(p))
                .map_or(self.background, |s| s.color),
        }
    }

    /// Renders `height×width` pixels covering `patch` of the view, sampling pixel centres.
    pub fn render_region(
        &self,
        view: &ViewTransform,
        patch: &PatchBox,
        height: usize,
        width: usize,
        object_only: bool,
        channels: usize,
    ) -> Result<ImageCanvas> {
        let bg = object_only.then_some([1.0; 3]);
        let (sx, sy) = (
            patch.w as f64 / width as f64,
            patch.h as f64 / height as f64,
        );
        let mut data = vec![0.0; channels * height * width];
        for y in 0..height {
            for x in 0..width {
                let q = [
                    patch.x as f64 + (x as f64 + 0.5) * sx,
                    patch.y as f64 + (y as f64 + 0.5) * sy,
                ];
                let c = self.color_at(view.to_world(q), bg);
                if channels == 1 {
                    data[y * width + x] = gray(&c);
                } else {
                    for ch in 0..3 {
                        data[ch * height * width + y * width + x] = c[ch];
                    }
                }
            }
        }
        Ok(ImageCanvas::new(height, width, channels, data)?)
    }

    pub fn render(
        &self,
        view: &ViewTransform,
        object_only: bool,
        channels: usize,
    ) -> Result<ImageCanvas> {
        let full = PatchBox {
            x: 0,
            y: 0,
            w: self.side,
            h: self.side,
        };
        self.render_region(view, &full, self.side, self.side, object_only, channels)
    }

    /// Pixels whose centre shows the object, occlusion ignored.
    pub fn object_mask(&self, view: &ViewTransform) -> MaskGrid {
        MaskGrid::from_fn(self.side, self.side, |y, x| {
            self.object()
                .contains(view.to_world([x as f64 + 0.5, y as f64 + 0.5]))
        })
    }

    /// Fraction of target pixels whose world point is visible in the reference view.
    pub fn cooccurrence(&self, reference: &ViewTransform, target: &ViewTransform) -> f64 {
        let s = self.side as f64;
        let mut seen = 0usize;
        for y in 0..self.side {
            for x in 0..self.side {
                let q = reference.to_view(target.to_world([x as f64 + 0.5, y as f64 + 0.5]));
                if (0.0..s).contains(&q[0]) && (0.0..s).contains(&q[1]) {
                    seen += 1;
                }
            }
        }
        seen as f64 / (self.side * self.side) as f64
    }
}

/// Parameters of the procedural dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDataConfig {
    pub side: usize,
    pub channels: usize,
    pub views: usize,
    pub val_fraction: f64,
    /// Share of pairs whose co-occurrence is drawn inside the training filter.
    pub in_range_fraction: f64,
    pub cooccurrence_range: (f64, f64),
    pub matches: usize,
    pub outliers: usize,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self {
            side: 32,
            channels: 3,
            views: 12,
            val_fraction: 0.125,
            in_range_fraction: 0.875,
            cooccurrence_range: (0.4, 0.7),
            matches: 48,
            outliers: 6,
        }
    }
}

/// Exact correspondences: uniform reference points carried through both views.
pub fn toy_matches(
    reference: &ViewTransform,
    target: &ViewTransform,
    side: usize,
    cfg: &ToyDataConfig,
    rng: &mut ctxpaint_core::StreamRng,
) -> MatchSet {
    let s = side as f64;
    let mut out = Vec::new();
    for _ in 0..cfg.matches {
        let r = [rng.random_range(0.0..s), rng.random_range(0.0..s)];
        let t = target.to_view(reference.to_world(r));
        let conf = rng.random_range(0.85..=1.0);
        if (0.0..s).contains(&t[0]) && (0.0..s).contains(&t[1]) {
            out.push(Match {
                ref_point: (r[0], r[1]),
                tar_point: (t[0], t[1]),
                confidence: conf,
            });
        }
    }
    for _ in 0..cfg.outliers {
        out.push(Match {
            ref_point: (rng.random_range(0.0..s), rng.random_range(0.0..s)),
            tar_point: (rng.random_range(0.0..s), rng.random_range(0.0..s)),
            confidence: rng.random_range(0.0..0.6),
        });
    }
    MatchSet::new(out)
}

fn pose_near(
    base: &SphericalPose,
    rng: &mut ctxpaint_core::StreamRng,
    dt: f64,
    dp: f64,
    dr: f64,
) -> SphericalPose {
    SphericalPose {
        theta: base.theta + rng.random_range(-dt..=dt),
        phi: base.phi + rng.random_range(-dp..=dp),
        r: base.r * rng.random_range(1.0 - dr..=1.0 + dr),
    }
}

/// Renders `n` pairs under `root` and writes the manifest and a VERSION file.
pub fn make_toy_dataset(
    root: &Path,
    n: usize,
    seed: Seed,
    cfg: &ToyDataConfig,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("toy dataset needs at least one pair".into()));
    }
    if cfg.side < 16 || !matches!(cfg.channels, 1 | 3) || cfg.views < 2 {
        return Err(Error::Config(format!(
            "toy dataset needs side >= 16, 1 or 3 channels and at least 2 views, got {}/{}/{}",
            cfg.side, cfg.channels, cfg.views
        )));
    }
    fs::create_dir_all(root).map_err(Error::io(root))?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("pair-{i:05}");
        let rs = derive_seed(seed, "toy-pair", i as u64);
        let mut rng = seeded_rng(rs, "toy-pair");
        let scene = ToyScene::random(cfg.side, derive_seed(rs, "scene", 0));
        let ref_pose = SphericalPose {
            theta: rng.random_range(-0.1..=0.1),
            phi: rng.random_range(-0.1..=0.1),
            r: rng.random_range(0.95..=1.05),
        };
        let ref_view = ViewTransform::new(&ref_pose, cfg.side);
        let want_in = rng.random::<f64>() < cfg.in_range_fraction;
        let (lo, hi) = cfg.cooccurrence_range;
        let (mut tar_pose, mut cooc) = (ref_pose, 1.0);
        for _ in 0..500 {
            let cand = pose_near(&ref_pose, &mut rng, 0.5, 0.6, 0.05);
            let c = scene.cooccurrence(&ref_view, &ViewTransform::new(&cand, cfg.side));
            let inside = (lo..=hi).contains(&c);
            (tar_pose, cooc) = (cand, c);
            if inside == want_in && (0.2..=0.95).contains(&c) {
                break;
            }
        }
        let tar_view = ViewTransform::new(&tar_pose, cfg.side);
        let dir = PathBuf::from(&id);
        let write_img = |name: &str, img: &ImageCanvas| -> Result<PathBuf> {
            let rel = dir.join(name);
            write_image(&root.join(&rel), img)?;
            Ok(rel)
        };
        let write_m = |name: &str, m: &MaskGrid| -> Result<PathBuf> {
            let rel = dir.join(name);
            write_mask(&root.join(&rel), m)?;
            Ok(rel)
        };
        let ref_path = write_img("ref.png", &scene.render(&ref_view, false, cfg.channels)?)?;
        let tar_path = write_img("tar.png", &scene.render(&tar_view, false, cfg.channels)?)?;
        let object_mask_path = write_m("ref_object.png", &scene.object_mask(&ref_view))?;
        let tar_object_mask_path = write_m("tar_object.png", &scene.object_mask(&tar_view))?;
        let matches = toy_matches(&ref_view, &tar_view, cfg.side, cfg, &mut rng);
        let match_path = dir.join("matches.json");
        write_matches(&root.join(&match_path), &matches)?;
        let mut views = Vec::with_capacity(cfg.views);
        for k in 0..cfg.views {
            let mut pose = ref_pose;
            if k > 0 {
                for _ in 0..100 {
                    pose = pose_near(&ref_pose, &mut rng, 0.15, 0.35, 0.05);
                    if !scene
                        .object_mask(&ViewTransform::new(&pose, cfg.side))
                        .is_empty()
                    {
                        break;
                    }
                }
            }
            let view = ViewTransform::new(&pose, cfg.side);
            views.push(ViewRecord {
                path: write_img(
                    &format!("view-{k:02}.png"),
                    &scene.render(&view, true, cfg.channels)?,
                )?,
                object_mask_path: write_m(
                    &format!("view-{k:02}-object.png"),
                    &scene.object_mask(&view),
                )?,
                pose,
            });
        }
        records.push(PairRecord {
            split: assign_split(&id, seed, cfg.val_fraction),
            id,
            ref_path,
            tar_path,
            cooccurrence: Some(cooc),
            match_path: Some(match_path),
            pose: Some(PosePair {
                reference: ref_pose,
                target: tar_pose,
            }),
            object_mask_path: Some(object_mask_path),
            tar_object_mask_path: Some(tar_object_mask_path),
            views,
            scene: Some(scene),
        });
    }
    let manifest = Manifest::new(root, records);
    manifest.save(&root.join(MANIFEST_FILE))?;
    let mut version =
        fs::File::create(root.join("VERSION")).map_err(Error::io(root.join("VERSION")))?;
    writeln!(
        version,
        "{TOY_VERSION}\nseed={}\nn={n}\nside={}\nchannels={}",
        seed.0, cfg.side, cfg.channels
    )
    .map_err(Error::io(root.join("VERSION")))?;
    Ok(manifest)
}

// --- frozen evaluation masks -------------------------------------------------

pub const FROZEN_MASK_INDEX: &str = "index.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrozenMask {
    pub id: String,
    pub task: TaskKind,
    pub kind: MaskKind,
    pub mask_path: PathBuf,
    /// Local-SR patch, when the task has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<PatchBox>,
}

/// Deterministic evaluation mask of one record: matching when possible for
/// reference-guided inpainting, 50% both-side outpainting, the dilated
/// object for view synthesis, and a centred patch for super-resolution.
pub fn eval_mask(
    manifest: &Manifest,
    rec: &PairRecord,
    task: TaskKind,
    opts: &DrawOptions,
    seed: Seed,
) -> Result<(MaskGrid, MaskKind, Option<PatchBox>)> {
    let tar = manifest.image(&rec.tar_path)?;
    let (h, w) = (tar.height(), tar.width());
    let s = derive_seed(seed, &format!("eval-mask:{}", rec.id), 0);
    Ok(match task {
        TaskKind::Inpaint => (
            gen_irregular_mask(h, w, s, &opts.irregular)?,
            MaskKind::Irregular,
            None,
        ),
        TaskKind::Outpaint => (
            ctxpaint_core::masks::gen_outpaint_mask_with_layout(
                h,
                w,
                0.5,
                ctxpaint_core::masks::OutpaintLayout::Both,
            )?,
            MaskKind::Outpaint,
            None,
        ),
        TaskKind::RefInpaint => {
            let matched = match &rec.match_path {
                Some(p) => gen_matching_mask(&manifest.matches(p)?, h, w, s, &opts.matching).ok(),
                None => None,
            };
            match matched {
                Some(m) => (m, MaskKind::Matching, None),
                None => (
                    gen_irregular_mask(h, w, s, &opts.irregular)?,
                    MaskKind::Irregular,
                    None,
                ),
            }
        }
        TaskKind::LocalSr => {
            let side = (opts.patch_side.0 + opts.patch_side.1) / 2;
            let side = side.min(h.min(w));
            let patch = PatchBox {
                x: (w - side) / 2,
                y: (h - side) / 2,
                w: side,
                h: side,
            };
            (MaskGrid::ones(h, w), MaskKind::Full, Some(patch))
        }
        TaskKind::Nvs => {
            let obj = match (&rec.views.get(1), &rec.tar_object_mask_path) {
                (Some(v), _) => manifest.mask(&v.object_mask_path)?,
                (None, Some(p)) => manifest.mask(p)?,
                (None, None) => {
                    return Err(Error::Config(format!(
                        "record {} has no target object mask",
                        rec.id
                    )))
                }
            };
            let k = opts.nvs.kernel_range.lo | 1;
            (
                ctxpaint_core::masks::dilate_mask(&obj, k)?,
                MaskKind::Nvs,
                None,
            )
        }
    })
}

/// Writes one mask per record plus a JSON-lines index.
pub fn freeze_masks(
    manifest: &Manifest,
    task: TaskKind,
    out: &Path,
    opts: &DrawOptions,
    seed: Seed,
) -> Result<Vec<FrozenMask>> {
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut index = Vec::new();
    let mut lines = Vec::new();
    for rec in &manifest.records {
        let (mask, kind, patch) = eval_mask(manifest, rec, task, opts, seed)?;
        let mask_path = PathBuf::from(format!("{}-{}.png", rec.id, task.as_str()));
        write_mask(&out.join(&mask_path), &mask)?;
        let entry = FrozenMask {
            id: rec.id.clone(),
            task,
            kind,
            mask_path,
            patch,
        };
        serde_json::to_writer(&mut lines, &entry).expect("index serialises");
        lines.push(b'\n');
        index.push(entry);
    }
    fs::write(out.join(FROZEN_MASK_INDEX), lines)
        .map_err(Error::io(out.join(FROZEN_MASK_INDEX)))?;
    Ok(index)
}

pub fn load_frozen_masks(dir: &Path) -> Result<Vec<(FrozenMask, MaskGrid)>> {
    let path = dir.join(FROZEN_MASK_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!(
                "no frozen masks at {}; run `make-masks` on the validation split first",
                dir.display()
            ))
        } else {
            Error::Io {
                path: path.clone(),
                source: e,
            }
        }
    })?;
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let entry: FrozenMask = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let mask = read_mask(&dir.join(&entry.mask_path))?;
        out.push((entry, mask));
    }
    Ok(out)
}

/// Composes the evaluation input and ground truth of a record under a frozen mask.
pub fn eval_sample(
    manifest: &Manifest,
    rec: &PairRecord,
    frozen: &FrozenMask,
    mask: &MaskGrid,
    opts: &DrawOptions,
) -> Result<DrawnSample> {
    let index = manifest
        .records
        .iter()
        .position(|r| r.id == rec.id)
        .unwrap_or(0);
    let reference = manifest.image(&rec.ref_path)?;
    let target = manifest.image(&rec.tar_path)?;
    let (stitched, gt) = match frozen.task {
        TaskKind::Inpaint | TaskKind::Outpaint => {
            (compose_plain(&target, mask, frozen.task)?, target)
        }
        TaskKind::RefInpaint => (
            compose_ref_inpaint(&reference, &target, mask)?,
            pane_concat(&reference, &target)?,
        ),
        TaskKind::LocalSr => {
            let patch = frozen.patch.ok_or_else(|| {
                Error::Config(format!("frozen mask for {} lacks a patch", rec.id))
            })?;
            let scene = rec
                .scene
                .as_ref()
                .ok_or_else(|| Error::Config(format!("record {} lacks a scene", rec.id)))?;
            let pose = rec
                .pose
                .as_ref()
                .ok_or_else(|| Error::Config(format!("record {} lacks a pose", rec.id)))?;
            let st = compose_local_sr(&reference, &patch, &opts.frame)?;
            let (framed, _) = pane_split(&st.canvas)?;
            let view = ViewTransform::new(&pose.reference, scene.side);
            let hr = scene.render_region(
                &view,
                &patch,
                reference.height(),
                reference.width(),
                false,
                reference.channels(),
            )?;
            (st, pane_concat(&framed, &hr)?)
        }
        TaskKind::Nvs => {
            let (v0, v1) = match (rec.views.first(), rec.views.get(1)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::Config(format!(
                        "record {} has fewer than two views",
                        rec.id
                    )))
                }
            };
            let reference = manifest.image(&v0.path)?;
            let target = manifest.image(&v1.path)?;
            let rel = RelativePose::between(&v0.pose, &v1.pose)?;
            let bg = &opts.nvs_background[..reference.channels()];
            (
                compose_nvs(&reference, mask, rel, bg, opts.nvs_fill, Seed(0))?,
                pane_concat(&reference, &target)?,
            )
        }
    };
    Ok(DrawnSample {
        stitched,
        target: gt,
        record: index,
        mask_kind: frozen.kind,
        fallback: false,
        patch_side: frozen.patch.map(|p| p.w),
        nvs_points: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn view_transform_inverts() {
        let v = ViewTransform::new(
            &SphericalPose {
                theta: 0.2,
                phi: -0.4,
                r: 1.1,
            },
            32,
        );
        for p in [[0.0, 0.0], [13.5, -7.25], [40.0, 3.0]] {
            let q = v.to_world(v.to_view(p));
            assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_views_fully_cooccur() {
        let scene = ToyScene::random(32, Seed(3));
        let v = ViewTransform::new(
            &SphericalPose {
                theta: 0.0,
                phi: 0.1,
                r: 1.0,
            },
            32,
        );
        assert_eq!(scene.cooccurrence(&v, &v), 1.0);
        let far = ViewTransform::new(
            &SphericalPose {
                theta: 0.0,
                phi: 1.2,
                r: 1.0,
            },
            32,
        );
        assert!(scene.cooccurrence(&v, &far) < 0.05);
    }

    #[test]
    fn filter_keeps_interval_and_counts_missing() {
        let rec = |c: Option<f64>| PairRecord {
            id: format!("{c:?}"),
            ref_path: "a".into(),
            tar_path: "b".into(),
            cooccurrence: c,
            match_path: None,
            pose: None,
            object_mask_path: None,
            tar_object_mask_path: None,
            split: Split::Train,
            views: vec![],
            scene: None,
        };
        let recs = vec![rec(Some(0.3)), rec(Some(0.5)), rec(Some(0.8)), rec(None)];
        let (kept, stats) = filter_cooccurrence(&recs, 0.4, 0.7);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].cooccurrence, Some(0.5));
        assert_eq!(
            stats,
            FilterStats {
                kept: 1,
                out_of_range: 2,
                missing: 1
            }
        );
        assert!(filter_cooccurrence(&[], 0.4, 0.7).0.is_empty());
    }

    #[test]
    fn policy_validation_and_choice() {
        let p = MaskPolicy::for_task(TaskKind::RefInpaint);
        p.validate().unwrap();
        assert_eq!(p.choose(0.74), MaskKind::Irregular);
        assert_eq!(p.choose(0.76), MaskKind::Matching);
        assert!(MaskPolicy {
            weights: vec![(MaskKind::Irregular, 0.5)]
        }
        .validate()
        .is_err());
    }

    #[test]
    fn split_is_pure() {
        assert_eq!(
            assign_split("pair-00001", Seed(4), 0.5),
            assign_split("pair-00001", Seed(4), 0.5)
        );
        let vals = (0..1000)
            .filter(|i| assign_split(&format!("p{i}"), Seed(4), 0.25) == Split::Val)
            .count();
        assert!((200..300).contains(&vals), "{vals}");
    }

    #[test]
    fn draw_options_scale_patch_range() {
        assert_eq!(DrawOptions::for_side(256).patch_side, (48, 72));
        assert_eq!(DrawOptions::for_side(32).patch_side, (6, 9));
    }

    #[test]
    fn toy_dataset_feeds_every_task() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyDataConfig {
            views: 3,
            ..ToyDataConfig::default()
        };
        make_toy_dataset(dir.path(), 4, Seed(9), &cfg).unwrap();
        let m = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.records.len(), 4);
        let opts = DrawOptions::for_side(32);
        for task in [
            TaskKind::Inpaint,
            TaskKind::Outpaint,
            TaskKind::RefInpaint,
            TaskKind::LocalSr,
            TaskKind::Nvs,
        ] {
            for k in 0..4 {
                let s = draw_training_sample(&m, task, &MaskPolicy::for_task(task), &opts, Seed(k))
                    .unwrap();
                assert_eq!(s.stitched.canvas.height(), s.target.height());
                assert_eq!(s.stitched.canvas.width(), s.target.width());
                assert!(!s.stitched.mask.is_empty());
                if let Some(p) = s.patch_side {
                    assert!((6..=9).contains(&p));
                }
            }
        }
    }
}
