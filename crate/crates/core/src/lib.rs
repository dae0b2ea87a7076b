//! Vehicle point-cloud completion pipeline.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff over dense `f64` tensors, parameter
//!   storage, checkpoints and the Adam optimizer.
//! - [`geometry`]: point clouds, meshes, kd-tree search, farthest point
//!   sampling and unit-box normalization.
//! - [`metrics`]: Chamfer and Earth Mover's distances (exact and auction),
//!   their differentiable tensor forms, and the overlap ratio.
//! - [`datagen`]: synthetic meshes, virtual depth cameras and partial scans.
//! - [`network`]: the encoder / decoder / refiner completion network.
//! - [`training`]: loss assembly, schedules and the training loop.
//! - [`registration`]: point-to-point ICP and rotation/translation errors.

pub mod datagen;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod network;
pub mod registration;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
