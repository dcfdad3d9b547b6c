//! Reverse-mode automatic differentiation over dense `f64` tensors, plus the
//! layers, optimizer and gradient checker the models are built from.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
mod tape;
mod tensor;

pub use tape::{
    inject_gradient_fault, log_sigmoid, sigmoid, BatchStats, FaultGuard, Gradients, NodeId, OpKind,
    Tape,
};
pub use tensor::Tensor;
