//! Context-based offline meta-RL.
//!
//! The crate is split along the pipeline:
//!
//! - [`data`]: transitions, trajectories, datasets, contexts and the binary
//!   dataset file format.
//! - [`envlab`]: desk-scale task families, scripted behavior policies and
//!   offline dataset generation.
//! - [`nn`]: feed-forward approximators with hand-written reverse-mode
//!   gradients, Adam, finite-difference checks and checkpoints.
//! - [`taskenc`]: the context encoder, its loss family, the gated update
//!   schedule and the representation-shift estimator.
//! - [`offlinerl`]: behavior-regularized actor-critic on detached task
//!   representations.
//! - [`theory`]: exact tabular verification of the return and
//!   performance-difference bounds and the sample-complexity corollary.
//! - [`harness`]: configuration, the training loop, meta-testing, ablations,
//!   metrics and plot data.
//!
//! Data-parallel work (bound sweeps, Monte Carlo trials, independent runs)
//! goes through [`par`], which uses rayon when the `parallel` feature is
//! enabled and falls back to plain iteration otherwise.

pub mod data;
pub mod envlab;
pub mod error;
pub mod harness;
pub mod nn;
pub mod offlinerl;
pub mod par;
pub mod rng;
pub mod taskenc;
pub mod theory;

pub use error::{Error, Result};
