//! Source-free hypothesis transfer workbench.
//!
//! A small, fully deterministic lab for adapting a classifier ensemble to an
//! unlabeled, covariate-shifted target domain without revisiting source data.
//! The pieces:
//!
//! - [`mat`] — minimal row-major f64 matrix with data-parallel kernels and a
//!   sequential fallback (feature `parallel`).
//! - [`diffnet`] — MLP with hand-derived analytic backprop, inverted dropout
//!   (resampled or fixed per-unit masks), SGD with Nesterov momentum, and
//!   JSON checkpoints.
//! - [`hypotheses`] — a shared feature extractor feeding M classifier heads,
//!   either independently initialized (IC) or one store viewed through M
//!   fixed dropout masks (MC).
//! - [`objectives`] — entropy / mutual-information / hypothesis-disparity
//!   losses (values and analytic gradients), all in nats.
//! - [`shiftdata`] — synthetic two-domain datasets with label-preserving
//!   covariate shift, CSV round-trip, and a deterministic batch iterator.
//! - [`adapt`] — the source-training and target-adaptation loops plus a
//!   one-call pipeline that writes a self-describing run directory.
//! - [`analysis`] — accuracy, calibration (Brier/ECE/reliability bins), and
//!   cross-hypothesis disagreement diagnostics.
//!
//! Every random choice flows from explicit `u64` seeds through a
//! platform-stable stream cipher RNG, so identical configs produce identical
//! artifacts down to the byte.

pub mod adapt;
pub mod analysis;
pub mod diffnet;
pub mod error;
pub mod hypotheses;
pub mod mat;
pub mod objectives;
pub mod seeds;
pub mod shiftdata;

pub use error::{Error, Result};
