use alloc::format;
use alloc::vec::Vec;

use super::{Autoencoder, Denoiser, InpaintContext, Latent, NoiseSchedule};
use crate::canvas::{pane_split, ImageCanvas, Seed, TaskKind};
use crate::error::{Error, Result};
use crate::rng::{seeded_rng, standard_normal, StreamRng};
use crate::stitch::StitchedCanvas;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub cfg_scale: f64,
    pub seed: Seed,
    /// Re-noise and paste the known latent after every step instead of only
    /// pasting known pixels at the end.
    pub composite_each_step: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, eta: 1.0, cfg_scale: 1.0, seed: Seed(0), composite_each_step: true }
    }
}

impl SamplerConfig {
    pub fn for_task(task: TaskKind, seed: Seed) -> Self {
        let cfg_scale = if task == TaskKind::Nvs { 2.5 } else { 1.0 };
        Self { cfg_scale, seed, ..Self::default() }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::invalid(format!("steps {} must lie in 1..={}", self.steps, schedule.steps())));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta {} must be finite and >= 0", self.eta)));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::invalid(format!("cfg scale {} must be finite and >= 0", self.cfg_scale)));
        }
        Ok(())
    }
}

/// Descending timesteps `t_1 > … > t_S`, evenly spaced and ending at `T`.
pub fn timesteps(schedule: &NoiseSchedule, steps: usize) -> Vec<usize> {
    let total = schedule.steps();
    (1..=steps).rev().map(|k| (k * total + steps / 2) / steps).map(|t| t.max(1)).collect()
}

/// `ε_null + s·(ε_cond − ε_null)`; the unit and zero scales return one branch untouched.
pub fn cfg_predict<D: Denoiser>(
    model: &D,
    stack: &Latent,
    t: usize,
    cond: &D::Cond,
    null: &D::Cond,
    scale: f64,
) -> Result<Latent> {
    if !(scale >= 0.0) {
        return Err(Error::invalid(format!("cfg scale {scale} must be >= 0")));
    }
    if scale == 1.0 {
        return model.predict_noise(stack, t, cond);
    }
    let eps_null = model.predict_noise(stack, t, null)?;
    if scale == 0.0 {
        return Ok(eps_null);
    }
    let eps_cond = model.predict_noise(stack, t, cond)?;
    if eps_cond.shape() != eps_null.shape() {
        return Err(Error::shape("conditional and null predictions differ in shape"));
    }
    let mut out = eps_null;
    for (o, c) in out.data_mut().iter_mut().zip(eps_cond.data()) {
        *o += scale * (c - *o);
    }
    Ok(out)
}

/// `σ_t = η·√((1−ᾱ_prev)/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_prev)`
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let a_t = schedule.alpha_bar(t);
    let a_prev = schedule.alpha_bar(t_prev);
    eta * libm::sqrt((1.0 - a_prev) / (1.0 - a_t)) * libm::sqrt(1.0 - a_t / a_prev)
}

/// `x̂_0 = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`
pub fn predict_x0(z_t: &Latent, eps: &Latent, t: usize, schedule: &NoiseSchedule) -> Result<Latent> {
    if z_t.shape() != eps.shape() {
        return Err(Error::shape("noise prediction differs from z_t in shape"));
    }
    let a_t = schedule.alpha_bar(t);
    let (sa, sn) = (libm::sqrt(a_t), libm::sqrt(1.0 - a_t));
    let mut out = z_t.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = (*o - sn * e) / sa;
    }
    Ok(out)
}

/// One η-parameterized DDIM update from `t` to `t_prev`. `η = 0` draws nothing from `rng`.
pub fn ddim_step(
    z_t: &Latent,
    eps: &Latent,
    t: usize,
    t_prev: usize,
    eta: f64,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<Latent> {
    if t_prev >= t || t > schedule.steps() {
        return Err(Error::invalid(format!("ddim step {t} -> {t_prev} is not decreasing within the schedule")));
    }
    let x0 = predict_x0(z_t, eps, t, schedule)?;
    let a_prev = schedule.alpha_bar(t_prev);
    let mut sigma = ddim_sigma(schedule, t, t_prev, eta);
    let budget = 1.0 - a_prev;
    if sigma * sigma > budget {
        log::warn!("ddim sigma^2 {} exceeds 1 - alpha_bar {} at t={t}; clamping", sigma * sigma, budget);
        sigma = libm::sqrt(budget);
    }
    let dir = libm::sqrt((budget - sigma * sigma).max(0.0));
    let sa = libm::sqrt(a_prev);
    let mut out = x0;
    for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = sa * *o + dir * e;
    }
    if eta > 0.0 {
        for o in out.data_mut() {
            *o += sigma * standard_normal(rng);
        }
    }
    Ok(out)
}

fn noise_like(shape: (usize, usize, usize), rng: &mut StreamRng) -> Latent {
    let mut z = Latent::zeros(shape.0, shape.1, shape.2);
    for v in z.data_mut() {
        *v = standard_normal(rng);
    }
    z
}

/// Full DDIM loop over the fixed context; returns the final latent.
pub fn sample_latent<D: Denoiser>(
    ctx: &InpaintContext,
    model: &D,
    schedule: &NoiseSchedule,
    cond: &D::Cond,
    null: &D::Cond,
    config: &SamplerConfig,
) -> Result<Latent> {
    config.validate(schedule)?;
    let mut rng = seeded_rng(config.seed, "ddim");
    let mut z = noise_like(ctx.z0.shape(), &mut rng);
    let ts = timesteps(schedule, config.steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let stack = ctx.input(&z)?;
        let eps = cfg_predict(model, &stack, t, cond, null, config.cfg_scale)?;
        z = ddim_step(&z, &eps, t, t_prev, config.eta, schedule, &mut rng)?;
        if config.composite_each_step {
            let a = schedule.alpha_bar(t_prev);
            let (sa, sn) = (libm::sqrt(a), libm::sqrt(1.0 - a));
            let plane = ctx.mask.plane();
            for c in 0..z.channels() {
                for i in 0..plane {
                    let noise = standard_normal(&mut rng);
                    if ctx.mask.data()[i] == 0.0 {
                        let k = c * plane + i;
                        z.data_mut()[k] = sa * ctx.z0.data()[k] + sn * noise;
                    }
                }
            }
        }
        if z.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(format!("non-finite latent after step t={t}")));
        }
    }
    Ok(z)
}

/// Samples the masked region and returns the target pane, with known pixels pasted back.
pub fn sample<D: Denoiser>(
    stitched: &StitchedCanvas,
    model: &D,
    ae: &dyn Autoencoder,
    schedule: &NoiseSchedule,
    cond: &D::Cond,
    null: &D::Cond,
    config: &SamplerConfig,
) -> Result<ImageCanvas> {
    let ctx = InpaintContext::new(stitched, ae)?;
    let z = sample_latent(&ctx, model, schedule, cond, null, config)?;
    let decoded = ae.decode(&z)?;
    let decoded = if decoded.same_shape(&stitched.canvas) {
        decoded
    } else {
        decoded.resize_bilinear(stitched.canvas.height(), stitched.canvas.width())?
    };
    let out = stitched.canvas.composite(&decoded, &stitched.mask)?;
    if stitched.task.is_two_pane() {
        Ok(pane_split(&out)?.1)
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::MaskGrid;
    use crate::diffusion::PixelSpace;
    use crate::stitch::compose_plain;
    use rand::Rng;

    /// Predicts noise as a fixed linear function of the stack so tests are cheap.
    struct Linear;

    impl Denoiser for Linear {
        type Cond = f64;

        fn predict_noise(&self, stack: &Latent, t: usize, cond: &f64) -> Result<Latent> {
            let c = (stack.channels() - 1) / 2;
            let mut out = stack.channel_slice(0, c)?;
            let known = stack.channel_slice(c, c)?;
            for (o, k) in out.data_mut().iter_mut().zip(known.data()) {
                *o = 0.3 * *o + cond * k + (t as f64) * 1e-4;
            }
            Ok(out)
        }
    }

    #[test]
    fn timesteps_descend_to_one_step() {
        let s = NoiseSchedule::default();
        let ts = timesteps(&s, 50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(timesteps(&s, 1000), (1..=1000).rev().collect::<Vec<_>>());
    }

    #[test]
    fn eta_one_matches_ancestral_variance() {
        let s = NoiseSchedule::default();
        for t in 1..=1000 {
            let (a, ap) = (s.alpha_bar(t), s.alpha_bar(t - 1));
            let posterior = (1.0 - ap) / (1.0 - a) * (1.0 - a / ap);
            let sigma = ddim_sigma(&s, t, t - 1, 1.0);
            assert!((sigma * sigma - posterior).abs() <= 1e-12);
        }
    }

    #[test]
    fn exact_noise_recovers_x0() {
        let s = NoiseSchedule::default();
        let mut rng = seeded_rng(Seed(4), "t");
        let x0 = Latent::new(3, 4, 8, (0..96).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let eps = noise_like((3, 4, 8), &mut rng);
        for t in [1, 10, 500, 1000] {
            let z = super::super::forward_noise(&x0, &eps, t, &s).unwrap();
            let back = predict_x0(&z, &eps, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-6, "t={t}");
            }
        }
    }

    #[test]
    fn eta_zero_consumes_no_randomness() {
        let s = NoiseSchedule::default();
        let mut rng = seeded_rng(Seed(1), "t");
        let z = noise_like((1, 4, 8), &mut rng);
        let eps = noise_like((1, 4, 8), &mut rng);
        let mut a = seeded_rng(Seed(9), "x");
        let b = a.clone();
        ddim_step(&z, &eps, 500, 480, 0.0, &s, &mut a).unwrap();
        assert_eq!(a, b);
        assert!(ddim_step(&z, &eps, 480, 500, 0.0, &s, &mut a).is_err());
    }

    #[test]
    fn cfg_identities() {
        let mut rng = seeded_rng(Seed(2), "t");
        let stack = noise_like((7, 4, 8), &mut rng);
        let cond = Linear.predict_noise(&stack, 10, &0.7).unwrap();
        let null = Linear.predict_noise(&stack, 10, &0.0).unwrap();
        assert_eq!(cfg_predict(&Linear, &stack, 10, &0.7, &0.0, 1.0).unwrap(), cond);
        assert_eq!(cfg_predict(&Linear, &stack, 10, &0.7, &0.0, 0.0).unwrap(), null);
        let g = cfg_predict(&Linear, &stack, 10, &0.7, &0.0, 2.5).unwrap();
        for ((g, c), n) in g.data().iter().zip(cond.data()).zip(null.data()) {
            assert!((g - (n + 2.5 * (c - n))).abs() < 1e-12);
        }
        assert!(cfg_predict(&Linear, &stack, 10, &0.7, &0.0, -1.0).is_err());
    }

    fn plain_fixture() -> StitchedCanvas {
        let mut rng = seeded_rng(Seed(3), "img");
        let img = ImageCanvas::from_fn(16, 16, 3, |_, _, _| rng.random_range(0.0..=1.0)).unwrap();
        let mask = MaskGrid::from_fn(16, 16, |y, x| (4..12).contains(&y) && (3..10).contains(&x));
        compose_plain(&img, &mask, TaskKind::Inpaint).unwrap()
    }

    #[test]
    fn sampling_is_seeded_and_pastes_back() {
        let s = NoiseSchedule::default();
        let st = plain_fixture();
        for eta in [0.0, 1.0] {
            for composite_each_step in [false, true] {
                let cfg = SamplerConfig { steps: 20, eta, seed: Seed(5), composite_each_step, ..Default::default() };
                let a = sample(&st, &Linear, &PixelSpace, &s, &0.5, &0.0, &cfg).unwrap();
                let b = sample(&st, &Linear, &PixelSpace, &s, &0.5, &0.0, &cfg).unwrap();
                assert_eq!(a, b);
                for c in 0..3 {
                    for y in 0..16 {
                        for x in 0..16 {
                            if !st.mask.get(y, x) {
                                assert_eq!(a.get(c, y, x).to_bits(), st.canvas.get(c, y, x).to_bits());
                            }
                        }
                    }
                }
            }
        }
        let other = SamplerConfig { steps: 20, seed: Seed(6), ..Default::default() };
        let first = SamplerConfig { steps: 20, seed: Seed(5), ..Default::default() };
        assert_ne!(
            sample(&st, &Linear, &PixelSpace, &s, &0.5, &0.0, &first).unwrap(),
            sample(&st, &Linear, &PixelSpace, &s, &0.5, &0.0, &other).unwrap()
        );
    }

    #[test]
    fn config_defaults_and_validation() {
        let s = NoiseSchedule::default();
        assert_eq!(SamplerConfig::default().steps, 50);
        assert_eq!(SamplerConfig::default().eta, 1.0);
        assert_eq!(SamplerConfig::for_task(TaskKind::Nvs, Seed(0)).cfg_scale, 2.5);
        assert_eq!(SamplerConfig::for_task(TaskKind::RefInpaint, Seed(0)).cfg_scale, 1.0);
        assert!(SamplerConfig { steps: 0, ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig { eta: -0.1, ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig { cfg_scale: f64::NAN, ..Default::default() }.validate(&s).is_err());
    }
}
