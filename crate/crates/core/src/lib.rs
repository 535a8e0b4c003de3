//! Weakly supervised semantic segmentation for event cameras.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here is a pure function of its inputs plus explicit
//! RNG state; file formats, checkpoints and the CLI live in the `evseg` crate.
//!
//! Module map:
//! - [`event`]: event streams, windowing, time reversal, voxel grids, frame rendering
//! - [`synth`]: threshold-crossing event simulator, dense ground truth, point labels
//! - [`labels`]: point-label sets and their validation rules
//! - [`network`]: recurrent encoder, decoder and cross-branch projections with backprop
//! - [`supervision`]: weak point loss, reliability, pseudo labels, dual loss
//! - [`prototypes`]: class prototypes, memory queues, contrastive and distillation losses
//! - [`optim`]: rectified Adam
//! - [`trainer`]: dual-student training loop and ablation modes
//! - [`evaluator`]: confusion matrices, mIoU and the ablation harness
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod evaluator;
pub mod event;
pub mod labels;
mod math;
pub mod network;
mod nn;
pub mod optim;
pub mod prototypes;
pub mod supervision;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use math::fingerprint_f64;
