//! Minimal layer engine: the layer set needed by the VGG-style classifier and
//! its comparison models, with exact reverse-mode gradients.

mod model;
pub mod ops;
mod presets;
mod spec;
mod tensor;

use thiserror::Error;

pub use model::{Gradients, Model, Pass, Trace};
pub use presets::{ArchSize, ModelPreset};
pub use spec::{format_stack, parse_stack, Activation, LayerSpec};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid layer stack: {0}")]
    Spec(String),
    #[error("batch normalization needs at least 2 samples in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("loss gradients need a train-mode forward pass")]
    NoTrainForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
