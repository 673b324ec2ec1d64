//! Transformer encoder with BERT-style parameter naming.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod params;
pub mod selector;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Head, ModelConfig};
pub use encoder::{build_model, forward_batch, predict, reinit_head, EncoderInput};
pub use params::{classify_path, Component, ParamLayout, ParamTree, Role};
pub use selector::{ElementId, ElementSet, Selection, Selector, SelectorTerm};
