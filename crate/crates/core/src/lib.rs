// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod graph;
mod kernels;
pub mod model;
pub mod optim;
pub mod profile;
pub mod rng;
pub mod spiking;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NormMode, Var};
pub use tensor::{Element, Tensor};
