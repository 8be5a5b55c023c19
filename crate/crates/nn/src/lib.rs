//! Minimal neural-network substrate: dense tensors, a reverse-mode tape,
//! strided (transposed) convolutions, losses, optimizers and checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod float;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod param;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
