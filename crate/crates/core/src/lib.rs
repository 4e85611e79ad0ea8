//! Pure algorithms behind in-context inpainting.
//!
//! A reference image and a masked target image are stitched side by side
//! into one canvas; filling the mask of that canvas with a diffusion
//! denoiser solves reference-guided editing tasks. This crate holds the
//! parts that need no IO: canvas arithmetic, mask synthesis, task-specific
//! stitching, pose encoding, prompt tables, low-rank adapter algebra, the
//! noise schedule with η-parameterized DDIM sampling, and evaluation
//! metrics. It is `no_std` and only needs `alloc`.
//!
//! The denoiser itself is pluggable through [`diffusion::Denoiser`].

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapters;
pub mod canvas;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod masks;
pub mod pose;
pub mod prompts;
pub mod rng;
pub mod stitch;

pub use canvas::{ImageCanvas, MaskGrid, Seed, TaskFamily, TaskKind};
pub use error::{Error, Result};
pub use rng::{seeded_rng, StreamRng};
