//! Image-to-image similarity from local descriptors.
//!
//! The pipeline: project descriptors to a low dimension, build their cosine
//! similarity matrix, refine it with entropy-regularized optimal transport
//! using per-descriptor dustbin gains, pick the strongest correspondence per
//! descriptor as a vote, transform votes with a small learned function, and
//! sum. Training differentiates through the whole pipeline, including the
//! unrolled Sinkhorn loop, under a warped binary cross-entropy loss whose
//! warp is discarded at inference.
//!
//! Modules:
//! - [`linalg`]: dense matrices and elementwise nonlinearities
//! - [`descriptor`] / [`dataset`]: descriptor sets, selection, projection,
//!   and the on-disk `ELVD` format
//! - [`transport`]: augmented similarity, log-domain Sinkhorn, refined block
//! - [`scoring`]: votes, pair similarity, Chamfer baselines
//! - [`model`]: parameters and `ELVC` checkpoints
//! - [`learning`]: backprop through the pipeline, AdamW, the training loop
//! - [`eval`]: re-ranking, AP/mAP@K, ranked-list and ground-truth files
//! - [`synthetic`]: seeded toy retrieval datasets
//! - [`inference`]: the f32 batch path used by the latency benchmark

pub mod dataset;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod inference;
pub mod learning;
pub mod linalg;
pub mod model;
pub mod scoring;
pub mod synthetic;
pub mod transport;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
