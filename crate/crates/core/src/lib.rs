//! Desk-scale testbed for adversarial observations against autoregressive
//! diffusion weather forecasters.
//!
//! The crate contains a synthetic chaotic "atmosphere", a small conditional
//! denoiser trained on it, exact reverse-mode gradients through unrolled
//! autoregressive sampling, the projected momentum attack with its baselines
//! and ablations, extreme-weather thresholds, and a chi-square detectability
//! analysis.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod climatology;
pub mod detect;
pub mod error;
pub mod grid;
pub mod inference;
pub mod io;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
