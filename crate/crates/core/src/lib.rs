//! Desk-scale laboratory for sponge model attacks on mobile-style inference.
//!
//! The pipeline mirrors what an attacker who swaps a victim's on-device
//! classifier would exercise end to end: train a vanilla and a sponge
//! (activation-densifying) model, quantize and serialize both, run them
//! through a zero-skipping executor, and compare latency, simulated energy
//! and battery drain under different device profiles.
//!
//! Modules:
//! - [`tensor`]: deterministic dense-tensor math with analytic backward ops
//!   and a finite-difference oracle.
//! - [`model`]: the two desk-scale architectures (depthwise-separable and
//!   residual) with trace-recording forward/backward passes.
//! - [`train`]: vanilla and sponge training objectives, the training loop,
//!   and hyperparameter grid search.
//! - [`deploy`]: `.smod` model serialization and post-training int8 affine
//!   quantization.
//! - [`energy`]: zero-skipping accelerator cost model and battery-drain
//!   simulation under device profiles.
//! - [`data`]: CIFAR-10 binary ingestion and a seeded synthetic generator.
//! - [`bench`] / [`executor`] / [`report`]: the benchmark harness: dense and
//!   zero-skip execution, repeated timed suites, statistics, and reports.

pub mod bench;
pub mod check;
pub mod cli;
pub mod config;
pub mod data;
pub mod deploy;
pub mod energy;
pub mod executor;
pub mod model;
pub mod report;
pub mod stats;
pub mod tensor;
pub mod train;

pub(crate) mod util;
