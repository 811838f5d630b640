//! Desk-scale workbench for asking which numerical time-stepper a tiny
//! transformer implements when it learns the harmonic oscillator in context.
//!
//! The crate covers the whole loop:
//!
//! - [`dynamics`]: seeded linear-regression and oscillator datasets from
//!   exact solutions, plus tokenization.
//! - [`numethods`]: the system matrix, closed-form `e^{AΔt}`, Taylor and
//!   Adams–Bashforth steppers and the intermediates each method implies.
//! - [`transformer`]: a single-head, normalization-free decoder with manual
//!   reverse-mode gradients, Adam training and activation capture/patching.
//! - [`probes`]: ridge linear probes, CCA-based Taylor probes and reverse
//!   probes, with the max-over-sites mean-R² aggregate.
//! - [`criteria`]: the four criteria per method, interventions and the
//!   synthetic byproduct analysis.
//! - [`registry`]: append-only CSV model/probe tables, queries and reports.
//! - [`pipeline`]: end-to-end orchestration used by the CLI and examples.

pub mod config;
pub mod criteria;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod numethods;
pub mod pipeline;
pub mod probes;
pub mod registry;
pub mod seed;
pub mod stats;
pub mod transformer;

pub use error::{Error, Result};
