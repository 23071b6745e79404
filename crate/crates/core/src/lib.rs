//! Two-stage multi-modal mixing alignment on synthetic point-cloud data.
//!
//! The pipeline trains a small permutation-invariant 3D encoder against
//! frozen text/image embedding providers using dual-level mixing:
//! feature-level convex combinations and input-level point splicing.
//! Everything is seeded and 64-bit; repeated runs are byte-identical.
//!
//! Module map:
//! - [`geometry`]: point-cloud primitives (synthetic shapes, unit-sphere
//!   normalization, farthest point sampling)
//! - [`dataset`]: balanced synthetic dataset builder and the MMPD file format
//! - [`mixing`]: lambda sampling, derangement pairing, masks, feature/input mixing
//! - [`frozen`]: synthetic frozen modality encoders and the MMEC embedding cache
//! - [`encoder`]: the trainable point encoder with exact analytic gradients
//! - [`losses`]: similarity matrices, directional InfoNCE, stage losses,
//!   learnable temperature
//! - [`trainer`]: AdamW, exponential LR schedule, the two training stages,
//!   MMCK checkpoints, step logs
//! - [`eval`]: zero-shot classification, linear probing, cross-modal retrieval,
//!   feature export
//! - [`config`]: flat `key = value` run configuration
//! - [`gradcheck`]: finite-difference verification of every analytic gradient

mod bytes;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frozen;
pub mod geometry;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod mixing;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
