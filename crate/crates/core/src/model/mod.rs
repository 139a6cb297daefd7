//! A small pre-norm decoder-only transformer with inspectable activations.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use config::{ModelConfig, Wiring};
pub use forward::{
    argmax, decode_argmax, decode_distribution, decode_logits, forward_trace, predict_next,
    softmax, ActivationTrace,
};
pub use params::Parameters;
