//! Domain-generalizable embedding training with local feature-distribution
//! perturbation and global prototype-memory calibration.
//!
//! Modules, bottom up:
//!
//! - [`tensor`]: dense tensors, reverse-mode tape, finite-difference oracle, file format.
//! - [`backbone`]: small convolutional feature extractor with perturbation hooks.
//! - [`lpm`]: per-domain perturbation of instance feature moments.
//! - [`gcm`]: prototype memory, global moments, calibration and identity losses.
//! - [`synthdata`]: synthetic multi-domain identity benchmark.
//! - [`harness`]: training, retrieval evaluation, ablations, gradient checks.

pub mod backbone;
pub mod error;
pub mod gcm;
pub mod harness;
pub mod lpm;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
