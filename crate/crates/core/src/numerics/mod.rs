//! Minimal dense-network core: affine layers, layer normalization, analytic
//! reverse-mode gradients, Adam, and a finite-difference oracle.
//!
//! All arithmetic is `f64`. Batches are `ndarray` matrices with one sample
//! per row.

mod adam;
mod gradcheck;
mod layer;
mod network;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use gradcheck::{finite_difference, grad_check, max_relative_error};
pub use layer::{Activation, DenseGrad, DenseLayer, LayerNorm, LayerNormCache, LayerNormGrad};
pub use network::{Gradients, Layer, LayerGrad, Network, Parameters, Tape};

/// Dense row-major matrix of `f64`.
pub type Matrix = ndarray::Array2<f64>;

/// Adam learning rate shared by every network in the crate.
pub const DEFAULT_LR: f64 = 5e-4;
