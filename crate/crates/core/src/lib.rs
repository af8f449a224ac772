#![forbid(unsafe_code)]
// index loops mirror the math in the dense kernels, and negated float
// comparisons are deliberate NaN rejection
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

//! Neuron-level gated editing of a toy vision-language transformer.
//!
//! The crate trains a small decoder-only transformer on synthetic paired
//! privacy data, probes which hidden dimensions carry the refusal signal,
//! aggregates those probes into per-layer neural gates, and edits the FFN
//! parameters with subject-position gradients truncated by the gate. An
//! evaluation harness scores refusal and utility before and after editing.

pub mod autodiff;
pub mod digest;
pub mod editor;
pub mod error;
pub mod eval;
pub mod gate;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
