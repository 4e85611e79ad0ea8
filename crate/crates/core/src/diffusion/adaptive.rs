use super::{sample, Autoencoder, Denoiser, NoiseSchedule, SamplerConfig};
use crate::canvas::{ImageCanvas, MaskGrid};
use crate::error::{Error, Result};
use crate::masks::dilate_mask;
use crate::pose::RelativePose;
use crate::rng::derive_seed;
use crate::stitch::{compose_nvs, MaskFill};

/// Extracts the foreground object of a synthesized view.
pub trait ForegroundDetector {
    fn detect(&self, image: &ImageCanvas) -> Result<MaskGrid>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdaptiveConfig {
    pub rough_steps: usize,
    /// Odd dilation kernel applied to the reference object mask.
    pub reference_dilation: usize,
    /// Odd dilation kernel applied to the detected foreground.
    pub detection_dilation: usize,
    pub fill: MaskFill,
    pub sampler: SamplerConfig,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            rough_steps: 10,
            reference_dilation: 5,
            detection_dilation: 3,
            fill: MaskFill::Zero,
            sampler: SamplerConfig { cfg_scale: 2.5, ..SamplerConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveOutput {
    pub image: ImageCanvas,
    pub rough: ImageCanvas,
    pub first_mask: MaskGrid,
    pub detected: MaskGrid,
    pub second_mask: MaskGrid,
}

/// Two-pass view synthesis: a short rough pass locates the object, whose
/// dilated detection becomes the mask of the full pass.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_sample<D: Denoiser>(
    reference: &ImageCanvas,
    ref_object_mask: &MaskGrid,
    pose: RelativePose,
    background: &[f64],
    detector: &dyn ForegroundDetector,
    model: &D,
    ae: &dyn Autoencoder,
    schedule: &NoiseSchedule,
    cond: &D::Cond,
    null: &D::Cond,
    config: &AdaptiveConfig,
) -> Result<AdaptiveOutput> {
    if ref_object_mask.is_empty() {
        return Err(Error::EmptyMask("reference object mask".into()));
    }
    if config.rough_steps == 0 || config.rough_steps >= config.sampler.steps {
        return Err(Error::invalid("rough pass must use fewer steps than the full pass"));
    }
    let first_mask = dilate_mask(ref_object_mask, config.reference_dilation)?;
    let seed = config.sampler.seed;
    let rough_cfg =
        SamplerConfig { steps: config.rough_steps, seed: derive_seed(seed, "rough-pass", 0), ..config.sampler };
    let rough_input = compose_nvs(reference, &first_mask, pose, background, config.fill, seed)?;
    let rough = sample(&rough_input, model, ae, schedule, cond, null, &rough_cfg)?;

    let detected = detector.detect(&rough)?;
    let second_mask = if detected.is_empty() {
        log::warn!("detector found no foreground; reusing the dilated reference mask");
        first_mask.clone()
    } else {
        dilate_mask(&detected, config.detection_dilation)?
    };
    let second_input = compose_nvs(reference, &second_mask, pose, background, config.fill, seed)?;
    let image = sample(&second_input, model, ae, schedule, cond, null, &config.sampler)?;
    Ok(AdaptiveOutput { image, rough, first_mask, detected, second_mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::Seed;
    use crate::diffusion::{Latent, PixelSpace};

    struct Damp;

    impl Denoiser for Damp {
        type Cond = f64;

        fn predict_noise(&self, stack: &Latent, _: usize, c: &f64) -> Result<Latent> {
            let mut z = stack.channel_slice(0, 3)?;
            z.data_mut().iter_mut().for_each(|v| *v *= 0.5 + c);
            Ok(z)
        }
    }

    struct Fixed(MaskGrid);

    impl ForegroundDetector for Fixed {
        fn detect(&self, _: &ImageCanvas) -> Result<MaskGrid> {
            Ok(self.0.clone())
        }
    }

    fn scene() -> (ImageCanvas, MaskGrid) {
        let obj = MaskGrid::from_fn(16, 16, |y, x| (5..10).contains(&y) && (4..9).contains(&x));
        let img = ImageCanvas::from_fn(16, 16, 3, |c, y, x| if obj.get(y, x) { 0.2 * c as f64 } else { 1.0 }).unwrap();
        (img, obj)
    }

    #[test]
    fn stub_detector_reduces_to_single_pass() {
        let (img, obj) = scene();
        let gt = MaskGrid::from_fn(16, 16, |y, x| (6..11).contains(&y) && (6..11).contains(&x));
        let pose = RelativePose::new(0.1, 0.3, 0.0).unwrap();
        let cfg = AdaptiveConfig {
            sampler: SamplerConfig { steps: 12, seed: Seed(3), cfg_scale: 2.5, ..Default::default() },
            ..Default::default()
        };
        let s = NoiseSchedule::default();
        let out =
            adaptive_sample(&img, &obj, pose, &[1.0; 3], &Fixed(gt.clone()), &Damp, &PixelSpace, &s, &0.2, &0.0, &cfg)
                .unwrap();
        assert!(out.second_mask.is_superset_of(&out.detected));
        let expect_mask = dilate_mask(&gt, cfg.detection_dilation).unwrap();
        assert_eq!(out.second_mask, expect_mask);
        let direct = compose_nvs(&img, &expect_mask, pose, &[1.0; 3], MaskFill::Zero, Seed(3)).unwrap();
        let again = sample(&direct, &Damp, &PixelSpace, &s, &0.2, &0.0, &cfg.sampler).unwrap();
        assert_eq!(out.image, again);
    }

    #[test]
    fn empty_detection_falls_back() {
        let (img, obj) = scene();
        let cfg = AdaptiveConfig {
            sampler: SamplerConfig { steps: 12, ..Default::default() },
            ..Default::default()
        };
        let s = NoiseSchedule::default();
        let pose = RelativePose::identity();
        let out = adaptive_sample(
            &img,
            &obj,
            pose,
            &[1.0; 3],
            &Fixed(MaskGrid::zeros(16, 16)),
            &Damp,
            &PixelSpace,
            &s,
            &0.2,
            &0.0,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.second_mask, out.first_mask);
        let bad = AdaptiveConfig { rough_steps: 12, ..cfg };
        let r = adaptive_sample(&img, &obj, pose, &[1.0; 3], &Fixed(obj.clone()), &Damp, &PixelSpace, &s, &0.2, &0.0, &bad);
        assert!(r.is_err());
        assert!(AdaptiveConfig::default().rough_steps < AdaptiveConfig::default().sampler.steps);
    }
}
