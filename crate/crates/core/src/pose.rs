//! Relative camera pose, its sinusoidal 4-vector encoding, and the
//! projector that turns it into one conditioning token.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use crate::canvas::Seed;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{fill_standard_normal, seeded_rng};

/// Absolute camera position on a sphere around the object.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SphericalPose {
    pub theta: f64,
    pub phi: f64,
    pub r: f64,
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - TAU * libm::floor((a + PI) / TAU);
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RelativePose {
    pub delta_theta: f64,
    pub delta_phi: f64,
    pub delta_r: f64,
}

impl RelativePose {
    /// Validates the polar offset and wraps the azimuth offset.
    pub fn new(delta_theta: f64, delta_phi: f64, delta_r: f64) -> Result<Self> {
        if !delta_theta.is_finite() || !delta_phi.is_finite() || !delta_r.is_finite() {
            return Err(Error::invalid("non-finite pose component"));
        }
        if !(-PI..=PI).contains(&delta_theta) {
            return Err(Error::invalid(format!("polar offset {delta_theta} outside [-pi, pi]")));
        }
        Ok(Self { delta_theta, delta_phi: wrap_angle(delta_phi), delta_r })
    }

    pub fn identity() -> Self {
        Self { delta_theta: 0.0, delta_phi: 0.0, delta_r: 0.0 }
    }

    /// Componentwise `target - reference`, azimuth wrapped.
    pub fn between(reference: &SphericalPose, target: &SphericalPose) -> Result<Self> {
        Self::new(target.theta - reference.theta, target.phi - reference.phi, target.r - reference.r)
    }

    pub fn inverse(&self) -> Result<Self> {
        Self::new(-self.delta_theta, -self.delta_phi, -self.delta_r)
    }
}

/// `(Δθ, sin Δφ, cos Δφ, Δr)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseFeature(pub [f64; 4]);

pub fn encode_pose(p: &RelativePose) -> Result<PoseFeature> {
    if !p.delta_theta.is_finite() || !p.delta_phi.is_finite() || !p.delta_r.is_finite() {
        return Err(Error::invalid("non-finite pose component"));
    }
    Ok(PoseFeature([p.delta_theta, libm::sin(p.delta_phi), libm::cos(p.delta_phi), p.delta_r]))
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + libm::exp(-x));
    s * (1.0 + x * (1.0 - s))
}

/// Two affine layers with SiLU between them, mapping a pose feature to one token.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseProjector {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl PoseProjector {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self { w1: Matrix::zeros(hidden, 4), b1: vec![0.0; hidden], w2: Matrix::zeros(dim, hidden), b2: vec![0.0; dim] }
    }

    /// Normal init with std `1/sqrt(fan_in)`; biases start at zero.
    pub fn init(dim: usize, hidden: usize, seed: Seed) -> Self {
        let mut rng = seeded_rng(seed, "pose-projector");
        let mut p = Self::zeros(dim, hidden);
        fill_standard_normal(&mut rng, p.w1.data_mut());
        fill_standard_normal(&mut rng, p.w2.data_mut());
        p.w1 = p.w1.scale(0.5);
        p.w2 = p.w2.scale(1.0 / libm::sqrt(hidden as f64));
        p
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    fn check(&self) -> Result<()> {
        let h = self.w1.rows();
        if self.w1.cols() != 4 || self.b1.len() != h || self.w2.cols() != h || self.b2.len() != self.w2.rows() {
            return Err(Error::shape(format!(
                "pose projector layers disagree: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                self.w1.rows(),
                self.w1.cols(),
                self.b1.len(),
                self.w2.rows(),
                self.w2.cols(),
                self.b2.len()
            )));
        }
        Ok(())
    }

    fn pre_activation(&self, f: &PoseFeature) -> Result<Vec<f64>> {
        let mut a = self.w1.matvec(&f.0)?;
        for (v, b) in a.iter_mut().zip(&self.b1) {
            *v += b;
        }
        Ok(a)
    }

    pub fn forward(&self, f: &PoseFeature) -> Result<Vec<f64>> {
        self.check()?;
        let hidden: Vec<f64> = self.pre_activation(f)?.into_iter().map(silu).collect();
        let mut out = self.w2.matvec(&hidden)?;
        for (v, b) in out.iter_mut().zip(&self.b2) {
            *v += b;
        }
        Ok(out)
    }

    /// Gradients of a scalar loss given `dL/d(output)`.
    pub fn backward(&self, f: &PoseFeature, grad_out: &[f64]) -> Result<ProjectorGrads> {
        self.check()?;
        if grad_out.len() != self.output_dim() {
            return Err(Error::shape(format!("gradient of length {} for a {}-dim token", grad_out.len(), self.output_dim())));
        }
        let pre = self.pre_activation(f)?;
        let hidden: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
        let w2 = Matrix::from_fn(self.w2.rows(), self.w2.cols(), |r, c| grad_out[r] * hidden[c]);
        let b2 = grad_out.to_vec();
        let d_hidden = self.w2.transpose().matvec(grad_out)?;
        let d_pre: Vec<f64> = d_hidden.iter().zip(&pre).map(|(g, &p)| g * silu_grad(p)).collect();
        let w1 = Matrix::from_fn(self.w1.rows(), 4, |r, c| d_pre[r] * f.0[c]);
        Ok(ProjectorGrads { w1, b1: d_pre, w2, b2 })
    }
}

/// Encodes and projects in one call.
pub fn project_pose(f: &PoseFeature, proj: &PoseProjector) -> Result<Vec<f64>> {
    proj.forward(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identity_and_quarter_turn() {
        assert_eq!(encode_pose(&RelativePose::identity()).unwrap().0, [0.0, 0.0, 1.0, 0.0]);
        let q = encode_pose(&RelativePose::new(0.0, PI / 2.0, 0.0).unwrap()).unwrap().0;
        assert!((q[1] - 1.0).abs() < 1e-15 && q[2].abs() < 1e-15 && q[0] == 0.0 && q[3] == 0.0);
    }

    #[test]
    fn azimuth_is_two_pi_periodic() {
        for i in 0..100 {
            let theta = -1.0 + 0.02 * i as f64;
            let phi = -3.0 + 0.06 * i as f64;
            let r = 0.01 * i as f64 - 0.5;
            let a = encode_pose(&RelativePose::new(theta, phi, r).unwrap()).unwrap().0;
            let b = encode_pose(&RelativePose::new(theta, phi + TAU, r).unwrap()).unwrap().0;
            for k in 0..4 {
                assert!((a[k] - b[k]).abs() <= 1e-12, "{k}: {} vs {}", a[k], b[k]);
            }
            assert!((a[1] * a[1] + a[2] * a[2] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_invalid_poses() {
        assert!(RelativePose::new(f64::NAN, 0.0, 0.0).is_err());
        assert!(RelativePose::new(0.0, f64::INFINITY, 0.0).is_err());
        assert!(RelativePose::new(4.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn wrapping_lands_in_half_open_interval() {
        for a in [-PI, PI, 3.0 * PI, -7.5, 0.25, 10.0] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!((libm::sin(w) - libm::sin(a)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projector_emits_zero_token() {
        for dim in [64, 1024] {
            let p = PoseProjector::zeros(dim, dim);
            let out = project_pose(&encode_pose(&RelativePose::new(0.3, 1.0, 0.1).unwrap()).unwrap(), &p).unwrap();
            assert_eq!(out.len(), dim);
            assert!(out.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn inconsistent_projector_is_rejected() {
        let mut p = PoseProjector::zeros(8, 8);
        p.b2.pop();
        assert!(p.forward(&PoseFeature([0.0; 4])).is_err());
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let proj = PoseProjector::init(16, 12, Seed(11));
        let f = encode_pose(&RelativePose::new(0.4, -2.0, 0.3).unwrap()).unwrap();
        let mut rng = seeded_rng(Seed(12), "target");
        let target: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &PoseProjector| -> f64 {
            p.forward(&f).unwrap().iter().zip(&target).map(|(o, t)| (o - t) * (o - t)).sum()
        };
        let out = proj.forward(&f).unwrap();
        let g_out: Vec<f64> = out.iter().zip(&target).map(|(o, t)| 2.0 * (o - t)).collect();
        let g = proj.backward(&f, &g_out).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4 || (analytic - numeric).abs() < 1e-9, "{analytic} vs {numeric}");
        };
        for i in 0..proj.w1.data().len() {
            let (mut p, mut m) = (proj.clone(), proj.clone());
            p.w1.data_mut()[i] += h;
            m.w1.data_mut()[i] -= h;
            check(g.w1.data()[i], (loss(&p) - loss(&m)) / (2.0 * h));
        }
        for i in 0..proj.w2.data().len() {
            let (mut p, mut m) = (proj.clone(), proj.clone());
            p.w2.data_mut()[i] += h;
            m.w2.data_mut()[i] -= h;
            check(g.w2.data()[i], (loss(&p) - loss(&m)) / (2.0 * h));
        }
        for i in 0..proj.b1.len() {
            let (mut p, mut m) = (proj.clone(), proj.clone());
            p.b1[i] += h;
            m.b1[i] -= h;
            check(g.b1[i], (loss(&p) - loss(&m)) / (2.0 * h));
        }
    }
}
