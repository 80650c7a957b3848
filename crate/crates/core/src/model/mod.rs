//! Trainable networks, parameter containers and the Adam optimizer.

mod adam;
mod network;
mod params;

pub use adam::{adam_step, OptimizerState};
pub use network::{
    backward, evaluate, forward, init_he, loss_and_grad, Batch, ForwardOutput, TinyConvConfig,
};
pub use params::{dot, validate_layers, LayerKind, LayerSpec, ParameterSet, Part};
