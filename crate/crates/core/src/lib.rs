//! Desk-scale laboratory for measuring and mitigating model-dependent
//! difficulty disparity between data groups.
//!
//! The crate trains small fully-connected networks on group-structured tasks
//! and measures two quantities per group pair:
//!
//! * **estimated disparity** `d_tilde` — the test-accuracy gap when each group
//!   is trained and evaluated in isolation, and
//! * **observed disparity** `d` — the gap between the same groups on one model
//!   trained on the combined data.
//!
//! When `d` exceeds `d_tilde` the model has *amplified* the difficulty gap.
//! The ratio `k = d / d_tilde` (or, more robustly, the `d_tilde` coefficient
//! of a least-squares fit of `d` over many tasks) quantifies the effect.
//!
//! Module map:
//!
//! * [`nn`] — from-scratch MLP: forward/backward, SGD with momentum and weight
//!   decay, input-gradient (Lipschitz) penalty, deterministic training.
//! * [`data`] — group-structured datasets: synthetic two-group generator,
//!   class-pair stitching, stratified splits, balancing, mitigation samplers,
//!   IDX and CSV loaders.
//! * [`metrics`] — group accuracies, disparities, amplification ratio, masked
//!   pairwise accuracy, Kendall's tau, cosine distance, rank transforms.
//! * [`stats`] — OLS with standard errors and R^2, single-component PLS.
//! * [`harness`] — the end-to-end protocols: two-stage audit, amplification
//!   sweep with the nuisance-regressor fit, design sweeps, mitigation, and the
//!   pairwise-difficulty analysis, plus config/report plumbing.
//!
//! Everything is deterministic under explicit seeds; see [`seed`] for how
//! per-condition seed streams are derived.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod stats;

mod linalg;

pub use error::{Error, Result};
