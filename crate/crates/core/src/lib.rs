//! Progressive cloud-edge inference: a cloud model writes a short sketch of the
//! answer, edge models expand the sketch sentences in parallel, and an ensemble
//! picks the best expansion.
//!
//! The crate holds the control plane (latency models, sketch-length selection,
//! multi-list dispatching, edge model selection, sentence merging, ensemble
//! scoring), pure fine-tuning formulas, generation backends, and a deterministic
//! discrete-event simulator wiring them together.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod cost_model;
pub mod dispatcher;
pub mod edge;
pub mod ensemble;
pub mod error;
pub mod finetune;
pub mod profiler;
pub mod scheduler;
pub mod sim;
pub mod util;

pub use error::{Error, Result};

/// Token counts.
pub type Tokens = u32;
