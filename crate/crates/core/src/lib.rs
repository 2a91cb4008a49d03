//! Localized style editing with attention-supervised per-style LoRA experts.

pub mod ablation;
pub mod data_synth;
mod error;
pub mod image;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod supervision;
pub mod trainer;

pub use error::{Error, Result};
