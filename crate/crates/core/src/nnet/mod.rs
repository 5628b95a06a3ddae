//! Small reverse-mode network library: strided 3D convolutions, their
//! transposes, dense layers and activations, assembled into the generators
//! and the discriminator. Each layer's forward pass returns a cache that its
//! backward pass consumes, so a network can be evaluated several times before
//! gradients are propagated.

pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod models;
pub mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use conv::{Conv3d, ConvGeom, ConvTranspose3d};
pub use layers::{leaky_relu, sigmoid, softmax, Linear, LEAKY_SLOPE};
pub use models::{
    head_scales, ConvStack, DecoderGenerator, DecoderTrace, DiscTrace, Discriminator, GenTrace, Generator,
    LayerKind, Network,
};
pub use tensor::{sgd_step, Param, Tensor};

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Transform(#[from] crate::transform::TransformError),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
}

/// Applies one momentum-SGD update to every parameter of `net`.
pub fn sgd_network<N: Network + ?Sized>(net: &mut N, lr: f64, momentum: f64) {
    let mut params = net.params_mut();
    sgd_step(&mut params, lr, momentum);
}

#[cfg(test)]
mod tests;
