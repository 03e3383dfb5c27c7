pub mod autograd;
pub mod data;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, RunningStats, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
