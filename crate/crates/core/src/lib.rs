//! Desk-scale experiments with linear and affine relational approximators of
//! transformer computation.
//!
//! A small decoder-only transformer is trained on synthetic relational
//! corpora. For each relation, the Jacobian between a middle-layer subject
//! state and the final object state is averaged over a handful of prompts,
//! giving four approximators of the model's own computation:
//!
//! * affine: `β W s + b`
//! * linear: `W s`
//! * bias: `s + b`
//! * translation: `s + E[o − s]`
//!
//! and [`eval`] measures how often each one decodes to the same top token as
//! the model.

pub mod config;
pub mod container;
pub mod diff;
pub mod error;
pub mod eval;
pub mod lre;
pub mod model;
pub mod pipeline;
pub mod projection;
pub mod relations;
pub mod trainer;

pub use error::{Error, Result};
