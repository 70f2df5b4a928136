//! recoproc-core: training and evaluation of recognition-aware image
//! restoration models.
//!
//! The crate trains image-to-image processing networks (super-resolution,
//! denoising, JPEG deblocking) whose outputs stay accurately recognizable
//! by a downstream classifier. It covers the full experiment lifecycle:
//!
//! * [`data`] — dataset ingestion, degraded/target pair construction,
//!   deterministic class splits
//! * [`degrade`] — the three corruption operators (bicubic downsampling,
//!   Gaussian noise, JPEG roundtrip)
//! * [`metrics`] — PSNR / SSIM / top-1 accuracy
//! * [`nn`] — the compute core: tensors, layers, explicit backprop,
//!   optimizers (rayon data-parallel with a sequential fallback behind
//!   the `parallel` feature)
//! * [`models`] — processor / transformer / recognizer builders and
//!   checkpoint IO
//! * [`losses`] — the joint training objectives and the stop-gradient
//!   boundary
//! * [`train`] — the training modes (plain, recognition-aware,
//!   unsupervised, transformer-decoupled, and ablations)
//! * [`harness`] — evaluation protocols: same-model records, transfer
//!   matrices, category splits, lambda sweeps
//! * [`report`] — CSV / markdown / image-grid rendering
//! * [`synth`] — a procedural labeled-image generator for desk-scale runs

pub mod config;
pub mod data;
pub mod degrade;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod par;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Image, Mat, Tensor};
