//! Continual multi-domain adapter learning over a frozen dual encoder.
//!
//! The library implements three cooperating mechanisms on top of a frozen,
//! seeded surrogate dual encoder:
//!
//! - a task-shared LoRA adapter trained with a bidirectional supervised
//!   contrastive loss (the zero-shot / generalization path),
//! - a mixture of multi-head LoRA experts gated by per-task routers that
//!   expand with each task and freeze afterwards (the incremental path),
//! - a prototype-based domain distribution selector that routes test
//!   samples between the two paths without task ids.
//!
//! Training follows the sequential multi-domain task-incremental protocol:
//! per task, fit prototypes, expand a router, train the expert mixture with
//! cross-entropy, freeze the router, then train the shared adapter with the
//! contrastive loss. Evaluation fills a task-by-task accuracy matrix from
//! which Transfer / Average / Last metrics are computed.
//!
//! All internal math is `f64`; every serialized tensor is kept on the `f32`
//! grid so checkpoints and dataset files round-trip losslessly.

pub mod adapters;
pub mod backbone;
pub mod data;
pub mod dds;
pub mod error;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod objectives;
pub mod params;
pub mod selftest;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use linalg::{Matrix, Rng, Vector};
