//! Flexi-LoRA laboratory: input-adaptive low-rank adaptation on a tiny
//! from-scratch transformer.
//!
//! The crate is organised around a strategy registry: every rank-allocation
//! policy (static LoRA, DyLoRA, DyLoRA+, router-driven Flexi) implements the
//! [`policy::RankPolicy`] trait and is selected by name at runtime. The rest
//! of the crate supplies the substrate those strategies run on:
//!
//! - [`numcore`] — dense tensors, a recorded op graph with reverse-mode
//!   differentiation, and a finite-difference oracle,
//! - [`model`] — char tokenizer and a small causal transformer whose base
//!   weights are pretrained once and frozen,
//! - [`adapters`] — full-capacity LoRA pairs truncated per sample to the
//!   first `r` rows/columns at forward time,
//! - [`router`] — difficulty labeling, class balancing, and the pooled
//!   embedding classifier that maps inputs to ranks,
//! - [`tasks`] — synthetic key/value recall and modular arithmetic chains
//!   with a controllable difficulty knob, plus the evaluation metrics,
//! - [`train`] — fine-tuning and evaluation loops shared by all policies,
//! - [`harness`] — config, checkpoints, experiment orchestration, reports.

pub mod adapters;
pub mod error;
pub mod harness;
pub mod model;
pub mod numcore;
pub mod optim;
pub mod policy;
pub mod router;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
