//! Reverse-mode automatic differentiation over f64 tensors.
//!
//! A [`Graph`] records every op applied to its [`Var`]s; [`Graph::backward`]
//! replays the tape in reverse. Parameters live in a [`ParamStore`] and are
//! placed on a graph through a [`Binding`], either trainable or frozen.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
pub mod optim;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::Padding;
pub use ops::{log_sigmoid, sigmoid, softplus};
pub use optim::{Adam, AdamConfig};
pub use params::{ArchiveError, Binding, GradMap, ParamStore};
pub use tensor::Tensor;
