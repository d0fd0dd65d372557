//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Everything computes in f64. Values are row-major 2-D tensors; scalars are
//! `[1, 1]`. A [`Graph`] records operations eagerly and [`Graph::backward`]
//! replays them in reverse to accumulate gradients. [`AdamState`] implements
//! AdamW with bias correction and a linear learning-rate decay schedule.

mod adam;
mod error;
mod graph;
mod init;
pub mod ops;
mod tensor;

pub use adam::AdamState;
pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use init::trunc_normal_init;
pub use tensor::Tensor;
