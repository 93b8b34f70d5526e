//! Dense tensors and reverse-mode automatic differentiation.

mod conv;
mod element;
pub mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use conv::{ConvGeometry, Padding};
pub use element::{DType, Element};
pub use graph::{softmax_channels, Gradients, Graph, LinearMap, Var};
pub use rng::{derive_seed, rng_from_seed, Rng};
pub use tensor::Tensor;
