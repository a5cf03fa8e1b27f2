//! Layers, losses and the weight-normalized ("Conv*") reparameterization.
//!
//! Every layer has a hand-written backward pass. Weight-bearing layers in
//! [`WeightMode::WeightNorm`](crate::optim::WeightMode) multiply by
//! `Ω/‖Ω‖` and store `∂L/∂Ω` (from [`wn_backward`]) on the raw weight.

mod batchnorm;
mod layer;
mod loss;
mod network;
mod weight_norm;

pub use batchnorm::{batchnorm_forward, BatchNormState, BN_EPSILON, BN_MOMENTUM};
pub use layer::{grl_backward, Layer, LayerSpec, LayerState};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use network::Sequential;
pub use weight_norm::{wn_backward, wn_effective_weight};
