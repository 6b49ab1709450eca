//! Category-aware image blending and a small feature-binding segmentation
//! network, with the evaluation protocols used to measure both.
//!
//! The crate covers the full loop: load a segmentation dataset, count which
//! categories appear together, blend image pairs driven by those
//! co-occurrence statistics, train a two-stage network that separates the
//! dominant scene from the phantom one, and score predictions with mIoU
//! over targeted subsets plus saliency-style metrics.
//!
//! Heavy passes (dataset statistics, batch blending, evaluation) run on
//! rayon when the default `parallel` feature is on; the sequential
//! fallbacks in [`par::seq`] are always compiled and produce bit-identical
//! results.

pub mod bindnet;
pub mod blend;
pub mod cooccur;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
pub mod par;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
