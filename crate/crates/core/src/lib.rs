//! Postoperative aspiration risk modeling and causal analysis on synthetic
//! cohorts.
//!
//! The crate is organized as a pipeline over hospital admission records:
//!
//! * [`domain`] — admission/event record types, invariant validation and the
//!   CSV schemas shared by every other module.
//! * [`synth`] — a structural causal model that generates admission bundles
//!   with known ground-truth treatment effects, standing in for gated EHR
//!   data.
//! * [`pipeline`] — cohort selection with a post-operative time window,
//!   report labeling, milligram-morphine-equivalent dose arithmetic and
//!   temporal feature extraction.
//! * [`learn`] — CART decision trees, random forests with Gini importance,
//!   gradient-boosted trees with logistic loss, and a single-hidden-layer
//!   MLP, all trained from scratch.
//! * [`eval`] — train/test splitting, AUROC, confusion-matrix metrics and
//!   false-negative error analysis.
//! * [`causal`] — doubly-robust AIPW estimation of average and
//!   gender-conditional treatment effects with propensity clipping and
//!   bootstrap confidence intervals.
//! * [`config`] / [`runner`] — run configuration and end-to-end command
//!   orchestration backing the `aspira` CLI.

pub mod causal;
pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod learn;
pub mod pipeline;
pub mod runner;
pub mod seeding;
pub mod synth;

pub use error::{Error, Result};
