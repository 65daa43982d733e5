//! Spiking-transformer pedestrian attribute recognition at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, multistep
//! leaky integrate-and-fire neurons with surrogate gradients, a
//! spiking-transformer student model, dual-level knowledge distillation
//! against a file-based teacher, multi-label metrics, and synaptic-operation
//! energy accounting.
//!
//! Core math is generic over the scalar type (`f32` for training,
//! `f64` for oracles and gradient checks); see [`scalar::Scalar`].

pub mod convops;
pub mod data;
pub mod distill;
pub mod energy;
pub mod error;
pub mod metrics;
pub mod model;
pub mod neuron;
pub mod optim;
pub mod runcfg;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Oracle/gradient-check precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
