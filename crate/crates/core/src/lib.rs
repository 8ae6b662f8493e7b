pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod nets;
pub mod rng;
pub mod tensor;
pub mod trainers;
pub mod verify;

pub use autograd::{NodeId, OpKind, Tape};
pub use data::{DomainDataset, Example, SplitSpec};
pub use error::{Error, Result};
pub use nets::{NetConfig, NetParams, Role};
pub use tensor::Tensor;
pub use trainers::{Method, Model, TrainerConfig};
