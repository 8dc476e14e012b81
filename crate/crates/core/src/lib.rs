//! One-shot class-incremental multi-label segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffkernel`]: dense tensors, a reverse-mode tape and a finite-difference checker.
//! - [`synthgen`]: synthetic overlapping-tract volumes, augmentation and the on-disk container.
//! - [`sampler`]: distance-transform region partitions, contrastive sample sets, batch subsets.
//! - [`losses`]: uncertainty distillation, BCE, multi-label voxel contrast, dynamic weighting.
//! - [`model`]: the encoder/two-decoder network, checkpoints and three-direction prediction.
//! - [`trainer`]: base step, LwF initialisation and the one-shot novel step.
//! - [`evalkit`]: Dice reports, forgetting and the ablation harness.
//! - [`cli`]: the `mc3d` command line.

pub mod cli;
pub mod diffkernel;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod sampler;
pub mod seed;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
