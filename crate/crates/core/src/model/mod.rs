//! Small fully-connected classifier: forward pass, smoothed cross-entropy,
//! analytic backward pass, finite-difference oracle, accuracy and logit
//! ensembling.

mod data;
mod mlp;

pub use data::{Dataset, Split};
pub use mlp::{
    accuracy, backward, backward_layers, central_difference, ensemble_logits, evaluate,
    fd_gradient, forward, loss, Activation, Logits, LossValue, ModelSpec,
};
