//! Group knowledge transfer training: compact edge CNNs and a large server
//! CNN trained alternately, exchanging feature maps and soft labels instead
//! of model weights.

pub mod accounting;
pub mod data;
pub mod distill;
pub mod models;
pub mod protocol;
pub mod tensor;
pub mod train;

pub use tensor::{Mode, Optimizer, OptimizerSpec, Tape, Tensor, TensorError, Var};
