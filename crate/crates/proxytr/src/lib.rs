//! Point cloud completion by set-to-set proxy translation.
//!
//! The library turns a partial 3D point cloud into a sequence of point
//! proxies, runs them through a geometry-aware Transformer encoder-decoder,
//! and folds the predicted proxies back into a dense completed cloud. It
//! ships with everything needed to run desk-scale experiments end to end:
//!
//! * [`tensor`] — dense tensors with reverse-mode autodiff (f32 and f64).
//! * [`geometry`] — point-cloud container, farthest point sampling, exact kNN.
//! * [`metrics`] — Chamfer distances, F-Score, Fidelity, MMD.
//! * [`datagen`] — synthetic benchmark generation (viewpoint cropping and
//!   noised depth back-projection over procedural primitives).
//! * [`proxy`], [`attention`], [`querygen`], [`rebuild`], [`model`] — the
//!   completion network itself.
//! * [`training`] — losses, optimizer loop, checkpointing.
//! * [`cli`] — batch subcommands behind the `proxytr` binary.

pub mod error;
pub mod attention;
pub mod datagen;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod proxy;
pub mod tensor;

pub use error::{Error, Result};
