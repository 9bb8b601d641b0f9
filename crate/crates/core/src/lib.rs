// SPDX-License-Identifier: MIT OR Apache-2.0

//! # headscope
//!
//! Per-head probing and intervention on an instrumented decoder-only
//! transformer that reads image tokens followed by text.
//!
//! - [`model`]: the transformer, its forward pass with capture and hooks,
//!   manifest I/O and decoding.
//! - [`probes`]: text-to-text (log-probability increase) and image-to-text
//!   (region attention) head scores, each from one forward pass per sample.
//! - [`intervene`]: head selection, per-head output scaling and attention
//!   path masking.
//! - [`analysis`]: rank correlation between score tables and attention
//!   summaries.
//! - [`bench`]: POPE / MCQ-POPE builders, discriminative metrics, CHAIR, and
//!   a planted-head harness with known ground truth.
//!
//! With the default `parallel` feature, per-sample work runs on rayon. All
//! reductions merge in sample order, so results do not depend on the
//! number of workers.

pub mod analysis;
pub mod bench;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod intervene;
pub mod model;
pub mod probes;
pub mod provenance;

pub use error::{Error, ErrorCategory, Result};
pub use model::{
    forward, init_random, load_model, next_token_distribution, save_model, CaptureSpec, Model,
    ModelConfig, Segment, TokenSequence, Trace,
};
