pub mod checkpoint;
pub mod config;
pub mod control;
pub mod denoiser;
pub mod diffusion;
pub mod encode;
pub mod error;
pub mod eval;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schema;
pub mod synthgen;
pub mod tape;
pub mod tensor;
pub mod theorem;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
