//! Cascaded-transformer novel view synthesis of articulated capsule humanoids,
//! with geometric prior injection and progressive linear-attention
//! distillation, built on a from-scratch reverse-mode autodiff engine.
//!
//! The crate is a library first: each major capability has a runnable example
//! under `examples/` (see the README), and `src/bin/prism.rs` is a thin CLI
//! wrapper over [`train`], [`synth`] and [`attention`].
//!
//! Module map:
//! - [`tensor`]: tape autodiff, AdamW, checkpoints, gradient verification
//! - [`geom`]: small fixed-size vector/matrix helpers (f64)
//! - [`camera`]: pinhole poses, Plücker ray maps, patch tokenization
//! - [`attention`]: full and linear attention, transformer blocks, benchmarks
//! - [`priors`]: body-parameter decoding, capsule-proxy kinematics, triplane
//! - [`splat`]: differentiable isotropic gaussian splatting
//! - [`cascade`]: the three-stage model with gated prior injection
//! - [`loss`]: composite training losses
//! - [`distill`]: progressive full-to-linear stitching schedule
//! - [`synth`]: synthetic capsule-humanoid scenes and datasets
//! - [`metrics`]: PSNR / SSIM
//! - [`config`], [`train`]: run configuration and the training loops

pub mod alloc_track;
pub mod attention;
pub mod body;
pub mod camera;
pub mod cascade;
pub mod config;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod geom;
pub mod image_io;
pub mod loss;
pub mod metrics;
pub mod priors;
pub mod splat;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
