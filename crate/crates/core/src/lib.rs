//! Semi-supervised human activity recognition over a small from-scratch
//! autodiff engine.
//!
//! The crate is `no_std` (with `alloc`). It covers the numerics, the
//! data-splitting protocol, augmentations, the 1D-CNN with mixing
//! calibration, MixHAR and the conventional semi-supervised baselines.
//! File formats, orchestration and the command line live in `har-lab`.

#![no_std]

extern crate alloc;

pub mod augment;
pub mod baselines;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod semisup;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
