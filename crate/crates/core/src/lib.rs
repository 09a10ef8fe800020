pub mod autodiff;
pub mod error;
pub mod flownet;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod sample;
pub mod subspace;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
