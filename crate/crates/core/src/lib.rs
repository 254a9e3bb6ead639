//! Panoramic semantic segmentation with deformable token mixing and prototype-based domain adaptation.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: tensors, reverse-mode gradients, AdamW with a poly schedule, checkpoints.
//! - [`geometry`]: equirectangular projection, area distortion, cubemap resampling, FoV crops.
//! - [`deform`]: deformable patch embedding, deformable MLP mixing, pooling and channel mixers.
//! - [`model`]: the four-stage encoder and the two decoder variants.
//! - [`adapt`]: segmentation/self-training losses, prototype memory, and the adaptation loop.
//! - [`metrics`]: confusion matrices, mIoU, directional and FoV protocols.
//! - [`data`]: the procedural multi-domain benchmark and PPM/PGM/manifest I/O.

pub mod adapt;
pub mod autodiff;
pub mod data;
pub mod deform;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
