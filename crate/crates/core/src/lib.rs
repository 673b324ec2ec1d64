//! Parameter-efficient fine-tuning laboratory for transformer encoders:
//! a small reverse-mode autodiff engine, a BERT-style encoder, Fisher-based
//! component ranking and LayerNorm masks, a masked fine-tuning harness and
//! the statistics used to compare strategies.

pub mod autodiff;
pub mod container;
pub mod data;
pub mod drift;
pub mod error;
pub mod finetune;
pub mod fisher;
pub mod format;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
