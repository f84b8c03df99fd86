//! Minimal CPU tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable and contiguous; every op allocates its result.
//! History is recorded only when an input requires gradients and grad mode
//! is enabled (see [`no_grad`]). Trainable state lives in [`Param`], whose
//! clones alias one storage.

mod error;
mod nn_ops;
mod ops;
mod param;
pub mod shape;
mod storage;
mod tensor;

pub use error::{Result, TensorError};
pub use nn_ops::{BatchStats, ConvGeometry};
pub use param::Param;
pub use storage::{DType, Element, Storage};
pub use tensor::{is_grad_enabled, no_grad, Grads, Tensor, TensorId};
