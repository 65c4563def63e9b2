//! Minimal dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Provides the kernels the trigait model needs (n-d convolution, batch and
//! layer normalization, softmax, pooling, matrix products), SGD with momentum,
//! a finite-difference gradient checker and the `TGCK` checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
mod layout;
mod ops;
pub mod optim;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use ops::conv::conv;
pub use ops::elementwise::{sigmoid, softplus, softplus_inv};
pub use ops::linalg::linear;
pub use ops::reduce::PoolKind;
pub use optim::{sgd_step, sgd_step_module, Buffer, Module, Parameter, SgdConfig};
pub use tensor::{is_grad_enabled, no_grad, Tensor};

pub mod nn {
    pub use crate::ops::nn::{
        batch_norm, cross_entropy, layer_norm, pairwise_distance, NormMode, RunningStats, BN_EPS,
        BN_MOMENTUM,
    };
}
