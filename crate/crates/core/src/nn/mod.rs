//! Small multilayer perceptrons with exact reverse-mode gradients.

mod data;
mod mlp;
mod model;

pub use data::{load_csv, Batch, BlobsSpec, Dataset};
pub use mlp::{
    accuracy, backward, forward, full_gradient, log_softmax, logits, loss_and_grad, per_example_losses, predictions,
    softmax_cross_entropy, ForwardCache,
};
pub use model::{init_params, Activation, LayerSpec, ModelSpec, Param, ParamKind, ParamSet};
