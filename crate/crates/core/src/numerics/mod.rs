//! Dense tensors, a reverse-mode autodiff tape, Adam, and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
pub use graph::{Graph, Var};
pub use nn::Mlp;
pub use params::ParameterStore;
pub use tensor::{sigmoid, softmax_slice, softplus, Tensor};
