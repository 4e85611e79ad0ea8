use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Cumulative signal coefficients `ᾱ_t` for `t = 0..=T`, with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_STEPS: usize = 1000;

    /// Linear β from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!("betas {beta_start}..{beta_end} must satisfy 0 < start <= end < 1")));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(Self::DEFAULT_STEPS, 1e-4, 2e-2).expect("default schedule is valid")
    }
}
