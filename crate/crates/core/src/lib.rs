//! Lifelong re-identification with privacy-preserving condensed replay.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`graph`], [`optim`]: dense tensors and a reverse-mode
//!   autodiff graph that supports gradients of gradients; [`gradcheck`]
//!   compares it against central differences.
//! - [`model`], [`checkpoint`]: the fixed small networks and their on-disk format.
//! - [`objectives`]: identity losses, gradient matching, reconstruction losses.
//! - [`data`]: the procedural multi-domain benchmark and its directory format.
//! - [`condense`]: face masking, exemplar selection and pixel-level condensation.
//! - [`style`]: channel statistics augmentation and kernel-prediction style models.
//! - [`lifelong`]: replay memory, dynamic budgets and the sequential trainer.
//! - [`metrics`]: retrieval evaluation (mAP, Rank-1) and run aggregation.

pub mod checkpoint;
pub mod condense;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod lifelong;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod style;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{BackwardMode, GradientMap, Graph, NodeId};
pub use tensor::Tensor;
