//! Hierarchical cross-attention visual question answering over structured report
//! trees, built on deterministic pseudo-encoders with hand-written gradients.

pub mod alignment;
pub mod config;
pub mod decoders;
pub mod error;
pub mod featurizers;
pub mod hierarchy;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod prompting;
pub mod trainer;

pub use error::{Error, Result};
