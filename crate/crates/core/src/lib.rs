//! Cross-modality architecture search over normalization layers.
//!
//! Every normalization layer of a small two-modality convolutional backbone
//! can keep one shared parameter set or split into per-modality sets. The
//! choice is relaxed to a softmax mixture, optimized jointly with the
//! network weights by alternating first-order bi-level steps, and then
//! discretized to a `'0'`/`'1'` bitstring (`'0'` = separate, `'1'` = shared).
//!
//! Module map:
//!
//! - [`tensor`]: f64 tensors and a reverse-mode tape.
//! - [`nn`]: normalization layers, conv blocks, the configurable backbone,
//!   and the Adam optimizer.
//! - [`losses`]: cross-entropy, batch-hard triplet, class-specific MMD,
//!   correlation consistency and their combinations.
//! - [`search`]: architecture probabilities, bi-level steps,
//!   discretization, manual scheme enumeration.
//! - [`data`]: synthetic two-modality data, identity splits, P x K sampling,
//!   checkpoints.
//! - [`eval`]: CMC / mAP retrieval metrics.
//! - [`train`]: schedules, resumable training state, the weight step.
//! - [`pipeline`] and [`config`]: the two-phase protocol used by the CLI.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod search;
pub mod tensor;
pub mod train;

pub use error::{Error, Modality, Result};
pub use tensor::{Graph, Tensor, Var};
