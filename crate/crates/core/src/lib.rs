//! Mixture of Block Attention (MoBA) at desk scale.
//!
//! The context is split into fixed-size key/value blocks. A parameter-free
//! gate scores every block against each query (inner product with the
//! mean-pooled block keys), keeps the top-k visible blocks, always keeps the
//! block holding the query, and the query then attends only to the union of
//! the selected blocks. The crate provides:
//!
//! - [`tensor`]: the small dense numerics layer everything else sits on.
//! - [`gating`]: block partitions, the top-k MoBA gate and the sliding-window
//!   and attention-sink gates expressed as MoBA routings.
//! - [`attention`]: dense attention, a gather-based MoBA reference, the grouped
//!   block pipeline and online-softmax recombination.
//! - [`autodiff`]: a tensor tape with reverse-mode gradients and a
//!   central-difference checker.
//! - [`model`]: a toy decoder-only LM with per-layer attention modes and a
//!   MoBA-then-full hybrid training schedule.
//! - [`metrics`]: sparsity arithmetic, position-wise and trailing LM loss,
//!   power-law fits.
//! - [`harness`]: operation-count reports, segmentation sweeps and the
//!   self-verification suites used by the `moba` CLI.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod gating;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
