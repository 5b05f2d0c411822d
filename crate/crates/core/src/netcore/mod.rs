//! Minimal reverse-mode tensor engine: the tape, the kernels behind it,
//! parameters and the Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use kernels::Padding;
pub use params::{uniform_fan_in, ParamId, ParamStore};
pub use tensor::Tensor;
