//! Loss functions, the optimizer, and the finite-difference gradient
//! checker.
//!
//! The bidirectional supervised contrastive loss and the cross-entropy
//! classification loss exist in two forms: plain functions over matrices
//! (the public operations, used by oracles and reports) and context-generic
//! builders used inside training, where they run on the gradient tape. The
//! plain form is a thin wrapper over the same builder evaluated in a
//! [`PlainCtx`](crate::graph::PlainCtx), so the two can never drift apart.

mod gradcheck;
mod loss;
mod optim;

pub use gradcheck::{
    default_fixture, gradcheck, probe_loss, run_default, GradCheckFixture, GradCheckGroup,
    GradCheckReport, GradCheckSettings, ProbeLoss,
};
pub use loss::{
    ce_class_loss, ce_loss_graph, cosine_graph, similarity_matrix, supcon_loss,
    supcon_loss_graph, Batch,
};
pub use optim::AdamWState;
