//! Sampling, evaluation and attention probing on a trained model.

use std::collections::BTreeSet;

use candle_core::{DType, Tensor};
use ctxpaint_core::canvas::pane_split;
use ctxpaint_core::diffusion::{
    cfg_predict, ddim_step, sample, timesteps, ForegroundDetector, InpaintContext, NoiseSchedule,
    PixelSpace, SamplerConfig,
};
use ctxpaint_core::eval::{
    attention_score_map, AttentionMean, AttentionProbe, EvalSample, MetricReport, PluginRegistry,
};
use ctxpaint_core::linalg::Matrix;
use ctxpaint_core::rng::{seeded_rng, standard_normal};
use ctxpaint_core::stitch::StitchedCanvas;
use ctxpaint_core::{ImageCanvas, MaskGrid};

use crate::backbone::{ProbeCapture, PROBE_LAYERS};
use crate::data::{eval_sample, DrawOptions, FrozenMask, Manifest};
use crate::error::{Error, Result};
use crate::model::PromptedModel;

/// Foreground = pixels differing from a known background colour by more than `tolerance` in some channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdDetector {
    pub background: Vec<f64>,
    pub tolerance: f64,
}

impl ForegroundDetector for ThresholdDetector {
    fn detect(&self, image: &ImageCanvas) -> ctxpaint_core::Result<MaskGrid> {
        if self.background.len() != image.channels() {
            return Err(ctxpaint_core::Error::Shape(
                "detector background has the wrong channel count".into(),
            ));
        }
        Ok(MaskGrid::from_fn(image.height(), image.width(), |y, x| {
            (0..image.channels())
                .any(|c| (image.get(c, y, x) - self.background[c]).abs() > self.tolerance)
        }))
    }
}

/// Conditional and null conditioning for a composed input.
pub fn conditions(model: &PromptedModel, stitched: &StitchedCanvas) -> Result<(Tensor, Tensor)> {
    let pose = stitched.meta.pose();
    Ok((model.condition(pose, false)?, model.condition(pose, true)?))
}

/// Samples the generated pane of `stitched`.
pub fn sample_stitched(
    model: &PromptedModel,
    schedule: &NoiseSchedule,
    stitched: &StitchedCanvas,
    config: &SamplerConfig,
) -> Result<ImageCanvas> {
    let (cond, null) = conditions(model, stitched)?;
    Ok(sample(
        stitched,
        model,
        &PixelSpace,
        schedule,
        &cond,
        &null,
        config,
    )?)
}

/// Generated pane and generated region of a composed input.
pub fn target_pane(
    stitched: &StitchedCanvas,
    canvas: &ImageCanvas,
) -> Result<(ImageCanvas, MaskGrid)> {
    if stitched.task.is_two_pane() {
        Ok((pane_split(canvas)?.1, stitched.mask.split()?.1))
    } else {
        Ok((canvas.clone(), stitched.mask.clone()))
    }
}

/// One evaluated record.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub id: String,
    pub stitched: StitchedCanvas,
    pub output: ImageCanvas,
    pub target: ImageCanvas,
    pub region: MaskGrid,
}

/// Samples every frozen mask whose record is in `manifest`; `None` copies the ground truth.
pub fn evaluate(
    model: Option<&PromptedModel>,
    schedule: &NoiseSchedule,
    manifest: &Manifest,
    frozen: &[(FrozenMask, MaskGrid)],
    opts: &DrawOptions,
    config: &SamplerConfig,
    registry: &PluginRegistry,
) -> Result<(MetricReport, Vec<Evaluated>)> {
    let mut out = Vec::new();
    for (entry, mask) in frozen {
        let Some(rec) = manifest.records.iter().find(|r| r.id == entry.id) else {
            log::warn!(
                "frozen mask {} has no record in the manifest; skipped",
                entry.id
            );
            continue;
        };
        let drawn = eval_sample(manifest, rec, entry, mask, opts)?;
        let (target, region) = target_pane(&drawn.stitched, &drawn.target)?;
        let output = match model {
            Some(m) => sample_stitched(m, schedule, &drawn.stitched, config)?,
            None => target.clone(),
        };
        out.push(Evaluated {
            id: rec.id.clone(),
            stitched: drawn.stitched,
            output,
            target,
            region,
        });
    }
    let samples: Vec<_> = out
        .iter()
        .map(|e| EvalSample {
            output: &e.output,
            target: &e.target,
            region: Some(&e.region),
        })
        .collect();
    let report = MetricReport::compute(&samples, registry)?;
    Ok((report, out))
}

/// Reference-pane attention of one probe layer at one sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: String,
    /// 1-based sampling step.
    pub step: usize,
    pub map: Matrix,
}

fn matrix_of(t: &Tensor) -> Result<Matrix> {
    let (r, c) = t.dims2()?;
    Ok(Matrix::from_vec(
        r,
        c,
        t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
    )?)
}

/// A grid cell is masked when any pixel it covers is.
pub fn pool_mask(mask: &MaskGrid, h: usize, w: usize) -> MaskGrid {
    let (mh, mw) = (mask.height(), mask.width());
    MaskGrid::from_fn(h, w, |gy, gx| {
        let ys = gy * mh / h..((gy + 1) * mh).div_ceil(h);
        let xs = gx * mw / w..((gx + 1) * mw).div_ceil(w);
        ys.into_iter().any(|y| xs.clone().any(|x| mask.get(y, x)))
    })
}

/// Scores of a captured layer against the stitched mask.
pub fn capture_map(capture: &ProbeCapture, mask: &MaskGrid, mean: AttentionMean) -> Result<Matrix> {
    let x = matrix_of(&capture.features.squeeze(0)?)?;
    let probe = AttentionProbe {
        layer: capture.layer.clone(),
        wq: matrix_of(&capture.wq)?,
        wk: matrix_of(&capture.wk)?,
    };
    let (h, w) = capture.grid;
    Ok(attention_score_map(
        &x,
        h,
        w,
        &pool_mask(mask, h, w),
        &probe,
        mean,
    )?)
}

/// Runs the sampler and records reference attention of `layers` at the requested steps.
pub fn attention_maps(
    model: &PromptedModel,
    schedule: &NoiseSchedule,
    stitched: &StitchedCanvas,
    config: &SamplerConfig,
    steps: &[usize],
    layers: &[String],
    mean: AttentionMean,
) -> Result<Vec<AttentionMap>> {
    if let Some(bad) = layers.iter().find(|l| !PROBE_LAYERS.contains(&l.as_str())) {
        return Err(Error::UnknownProbe {
            name: bad.clone(),
            available: PROBE_LAYERS.join(", "),
        });
    }
    if let Some(bad) = steps.iter().find(|&&s| s == 0 || s > config.steps) {
        return Err(Error::Config(format!(
            "step {bad} outside 1..={}",
            config.steps
        )));
    }
    if stitched.mask.is_empty() {
        return Err(ctxpaint_core::Error::EmptyMask(
            "attention probing needs masked queries".into(),
        )
        .into());
    }
    config.validate(schedule)?;
    let wanted: BTreeSet<usize> = steps.iter().copied().collect();
    let ctx = InpaintContext::new(stitched, &PixelSpace)?;
    let (cond, null) = conditions(model, stitched)?;
    let mut rng = seeded_rng(config.seed, "ddim");
    let (c, h, w) = ctx.z0.shape();
    let mut z = ctxpaint_core::diffusion::Latent::zeros(c, h, w);
    z.data_mut()
        .iter_mut()
        .for_each(|v| *v = standard_normal(&mut rng));
    let ts = timesteps(schedule, config.steps);
    let mut out = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let stack = ctx.input(&z)?;
        if wanted.contains(&(i + 1)) {
            let mut captures = Vec::new();
            model.predict_noise_probed(&stack, t, &cond, &mut captures)?;
            for cap in captures.iter().filter(|cap| layers.contains(&cap.layer)) {
                out.push(AttentionMap {
                    layer: cap.layer.clone(),
                    step: i + 1,
                    map: capture_map(cap, &stitched.mask, mean)?,
                });
            }
        }
        if i + 1 == *wanted.last().unwrap_or(&0) {
            break;
        }
        let eps = cfg_predict(model, &stack, t, &cond, &null, config.cfg_scale)?;
        z = ddim_step(
            &z,
            &eps,
            t,
            ts.get(i + 1).copied().unwrap_or(0),
            config.eta,
            schedule,
            &mut rng,
        )?;
    }
    Ok(out)
}

/// Min-max normalised heat map, enlarged by nearest sampling to `height × width`.
pub fn heatmap_image(map: &Matrix, height: usize, width: usize) -> Result<ImageCanvas> {
    let data = map.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (r, c) = (map.rows(), map.cols());
    Ok(ImageCanvas::from_fn(height, width, 1, |_, y, x| {
        (map.get(y * r / height, x * c / width) - lo) / span
    })?)
}
