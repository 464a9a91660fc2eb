pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{BatchNormConfig, BatchNormStats, Mode, Tape, Var};
pub use config::{Fusion, ModelConfig, Preset};
pub use error::{Error, Result};
pub use network::Model;
pub use params::{Binding, Layout, ParameterStore};
pub use tensor::{Scalar, Tensor};
