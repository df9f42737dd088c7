//! Minimal dense-tensor numerics with reverse-mode automatic differentiation.
//!
//! Everything is computed eagerly on the CPU. `f32` is the working precision;
//! `f64` is available for gradient verification through the same code path.

mod error;
mod gradcheck;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use graph::{transpose_tensor, Gradients, Graph, Var};
pub use optim::{sgd_step, AdamW, AdamWConfig};
pub use scalar::Real;
pub use tensor::Tensor;
