use alloc::format;

use rand::Rng;

use super::{Denoiser, InpaintContext, Latent, NoiseSchedule};
use crate::canvas::Seed;
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, seeded_rng};

/// Which latent positions enter the noise-prediction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossWeighting {
    #[default]
    All,
    Masked,
}

/// The random quantities of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDraw {
    pub t: usize,
    pub noise: Latent,
    pub drop_cond: bool,
}

/// Draws `t ~ U{1..T}`, `ε ~ N(0, I)` and the condition-dropout coin.
pub fn draw_training(
    seed: Seed,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    cfg_drop_prob: f64,
) -> Result<TrainingDraw> {
    if !(0.0..1.0).contains(&cfg_drop_prob) {
        return Err(Error::invalid(format!("cfg drop probability {cfg_drop_prob} outside [0, 1)")));
    }
    let mut rng = seeded_rng(seed, "train-step");
    let t = rng.random_range(1..=schedule.steps());
    let drop_cond = rng.random::<f64>() < cfg_drop_prob;
    let mut noise = Latent::zeros(shape.0, shape.1, shape.2);
    fill_standard_normal(&mut rng, noise.data_mut());
    Ok(TrainingDraw { t, noise, drop_cond })
}

/// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`
pub fn forward_noise(z0: &Latent, eps: &Latent, t: usize, schedule: &NoiseSchedule) -> Result<Latent> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape("noise differs from z_0 in shape"));
    }
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (libm::sqrt(a), libm::sqrt(1.0 - a));
    let mut out = z0.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = sa * *o + sn * e;
    }
    Ok(out)
}

/// Mean squared noise-prediction error of one draw.
pub fn noise_mse(eps: &Latent, pred: &Latent, mask: &Latent, weighting: LossWeighting) -> Result<f64> {
    if eps.shape() != pred.shape() {
        return Err(Error::shape("prediction differs from the noise in shape"));
    }
    let plane = eps.plane();
    let (mut sum, mut count) = (0.0, 0usize);
    for (k, (e, p)) in eps.data().iter().zip(pred.data()).enumerate() {
        if weighting == LossWeighting::Masked && mask.data()[k % plane] == 0.0 {
            continue;
        }
        sum += (e - p) * (e - p);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask("no positions enter the loss".into()));
    }
    Ok(sum / count as f64)
}

/// Loss of one training step without gradients.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<D: Denoiser>(
    ctx: &InpaintContext,
    model: &D,
    schedule: &NoiseSchedule,
    cond: &D::Cond,
    null: &D::Cond,
    cfg_drop_prob: f64,
    weighting: LossWeighting,
    seed: Seed,
) -> Result<f64> {
    let draw = draw_training(seed, schedule, ctx.z0.shape(), cfg_drop_prob)?;
    let z_t = forward_noise(&ctx.z0, &draw.noise, draw.t, schedule)?;
    let c = if draw.drop_cond { null } else { cond };
    let pred = model.predict_noise(&ctx.input(&z_t)?, draw.t, c)?;
    let loss = noise_mse(&draw.noise, &pred, &ctx.mask, weighting)?;
    if !loss.is_finite() {
        return Err(Error::Model(format!(
            "non-finite loss at t={} seed={} |z_t|={}",
            draw.t,
            seed.0,
            libm::sqrt(z_t.squared_norm())
        )));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::{ImageCanvas, MaskGrid, TaskKind};
    use crate::diffusion::PixelSpace;
    use crate::stitch::compose_plain;
    use alloc::vec::Vec;

    /// Recovers the exact noise from the stack given the clean latent.
    struct Oracle<'a> {
        z0: &'a Latent,
        schedule: &'a NoiseSchedule,
    }

    impl Denoiser for Oracle<'_> {
        type Cond = ();

        fn predict_noise(&self, stack: &Latent, t: usize, _: &()) -> Result<Latent> {
            let z_t = stack.channel_slice(0, self.z0.channels())?;
            let a = self.schedule.alpha_bar(t);
            let data = z_t
                .data()
                .iter()
                .zip(self.z0.data())
                .map(|(z, x)| (z - libm::sqrt(a) * x) / libm::sqrt(1.0 - a))
                .collect();
            Latent::new(z_t.channels(), z_t.height(), z_t.width(), data)
        }
    }

    struct Zero;

    impl Denoiser for Zero {
        type Cond = ();

        fn predict_noise(&self, stack: &Latent, _: usize, _: &()) -> Result<Latent> {
            stack.channel_slice(0, (stack.channels() - 1) / 2).map(|z| Latent::zeros(z.channels(), z.height(), z.width()))
        }
    }

    fn fixture() -> InpaintContext {
        let img = ImageCanvas::from_fn(8, 16, 1, |_, y, x| ((y * 16 + x) % 7) as f64 / 6.0).unwrap();
        let st = compose_plain(&img, &MaskGrid::from_fn(8, 16, |y, _| y < 4), TaskKind::Inpaint).unwrap();
        InpaintContext::new(&st, &PixelSpace).unwrap()
    }

    #[test]
    fn oracle_denoiser_has_near_zero_loss() {
        let s = NoiseSchedule::default();
        let ctx = fixture();
        let oracle = Oracle { z0: &ctx.z0, schedule: &s };
        for seed in 0..20 {
            let l = training_loss(&ctx, &oracle, &s, &(), &(), 0.0, LossWeighting::All, Seed(seed)).unwrap();
            assert!(l < 1e-12, "{l}");
        }
    }

    #[test]
    fn zero_predictor_loss_is_mean_noise_energy() {
        let s = NoiseSchedule::default();
        let ctx = fixture();
        let l = training_loss(&ctx, &Zero, &s, &(), &(), 0.15, LossWeighting::All, Seed(7)).unwrap();
        let draw = draw_training(Seed(7), &s, ctx.z0.shape(), 0.15).unwrap();
        let expect = draw.noise.data().iter().map(|e| e * e).sum::<f64>() / draw.noise.data().len() as f64;
        assert!((l - expect).abs() < 1e-12);
        let masked = training_loss(&ctx, &Zero, &s, &(), &(), 0.0, LossWeighting::Masked, Seed(7)).unwrap();
        let d = draw_training(Seed(7), &s, ctx.z0.shape(), 0.0).unwrap();
        let vals: Vec<f64> = d.noise.data()[..64].to_vec();
        assert!((masked - vals.iter().map(|e| e * e).sum::<f64>() / 64.0).abs() < 1e-12);
    }

    #[test]
    fn drop_rate_and_range() {
        let s = NoiseSchedule::default();
        let mut drops = 0;
        for i in 0..4000 {
            let d = draw_training(Seed(i), &s, (1, 2, 2), 0.15).unwrap();
            assert!((1..=1000).contains(&d.t));
            drops += usize::from(d.drop_cond);
        }
        assert!((drops as f64 / 4000.0 - 0.15).abs() < 0.03);
        assert!(draw_training(Seed(0), &s, (1, 2, 2), 1.0).is_err());
    }
}
