//! CS-Mixer: a hierarchical vision MLP with low-rank spatial-channel token
//! mixing, built on a self-contained f64 autodiff engine.
//!
//! The crate is organized around five concerns:
//!
//! * [`tensor`] — dense tensors plus a record/replay differentiation tape;
//! * [`model`] — the CS-Mixer architecture (cross-scale embedding, mixer
//!   stages, patch merging, classifier head);
//! * [`profiler`] — closed-form parameter and MAC accounting per layer;
//! * [`training`] — loss/metrics, AdamW, LR schedule, EMA, the train loop;
//! * [`data`] — CIFAR-10 binary ingestion, synthetic datasets, checkpoints,
//!   weight-grid export.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod profiler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use tensor::{RearrangeSpec, Tape, Tensor, TensorId};
