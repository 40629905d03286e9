//! EraseNet document-image denoising on a self-contained tensor and
//! reverse-mode autodiff engine.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for storage and
//! training, `f64` for gradient verification); the aliases below name the
//! concrete instantiations.

pub mod autograd;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{Eager, Graph, Tape, Var};
pub use data::ImageBuffer;
pub use error::{CheckpointError, Error, Result};
pub use model::{EraseNet, ModelSpec, Variant};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type EraseNet32 = EraseNet<f32>;
