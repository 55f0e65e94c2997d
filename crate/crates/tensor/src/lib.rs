//! Minimal dense tensor engine with tape-based reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Graph`] through [`Var`] handles and differentiated with
//! [`Graph::backward`]. Everything is single threaded and bit-reproducible.

mod element;
mod error;
mod gradcheck;
mod graph;
mod ops;
mod params;
mod rng;
mod shape;
mod tensor;
mod vjp;

pub use element::{lit, DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{Binder, ParamStore};
pub use rng::{gumbel_from_uniform, sample_gumbel, RngSnapshot, RngState, GUMBEL_EPS};
pub use shape::{broadcast_shape, inverse_permutation, permute_data, permuted_shape};
pub use tensor::{numel, strides, Tensor};
