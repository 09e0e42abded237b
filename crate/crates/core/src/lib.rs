//! Training library for detecting rare human-object interactions with
//! generated supplementary images.
//!
//! Generated images differ in appearance from the original data. This crate
//! closes that gap with two plug-in components on top of a one-stage HOI
//! detector:
//!
//! * [`alignment`]: gradient-reversed domain discriminators on backbone and
//!   encoder tokens, plus a prototype graph over the relationship tokens
//!   whose prototype nodes feed an instance-level discriminator.
//! * [`context`]: masked reconstruction of generated images, conditioned on
//!   gated features of a paired original image.
//!
//! [`trainer`] composes the losses and runs fine-tuning, [`eval`] computes
//! rare/non-rare mAP and domain-gap diagnostics, and [`data`] synthesizes a
//! desk-scale two-domain long-tail dataset.

pub mod alignment;
pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;
pub mod presets;
pub mod trainer;

pub use error::{Error, Result};
